#pragma once

#include <span>
#include <vector>

#include "iekd/tape.hpp"

namespace iekd::ops {

// ---- elementwise -----------------------------------------------------------
// Binary ops require identical shapes; the only broadcast allowed is a scalar
// ({1}) operand against any shape.
NodeId add(Tape& t, NodeId a, NodeId b);
NodeId sub(Tape& t, NodeId a, NodeId b);
NodeId mul(Tape& t, NodeId a, NodeId b);
NodeId div(Tape& t, NodeId a, NodeId b);
NodeId scalar_mul(Tape& t, NodeId a, double c);
NodeId neg(Tape& t, NodeId a);
NodeId abs(Tape& t, NodeId a);
NodeId relu(Tape& t, NodeId a);
NodeId leaky_relu(Tape& t, NodeId a, double slope);
NodeId sqrt(Tape& t, NodeId a);  // d/dx at 0 defined as 0

// ---- linear algebra ---------------------------------------------------------
NodeId matmul(Tape& t, NodeId a, NodeId b);      // [m,k] x [k,n] -> [m,n]
NodeId transpose2d(Tape& t, NodeId a);           // [m,n] -> [n,m]
NodeId add_row_bias(Tape& t, NodeId x, NodeId bias);  // [n,d] + [d]

// ---- convolution (stride 1, same padding pad = k/2) -------------------------
NodeId conv2d(Tape& t, NodeId input, NodeId kernel);            // x[N,Ci,H,W], w[Co,Ci,K,K]
NodeId conv2d_transpose(Tape& t, NodeId input, NodeId kernel);  // x[N,Ci,H,W], w[Ci,Co,K,K]

// ---- batch normalization ----------------------------------------------------
struct BatchNormState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
};
NodeId batch_norm(Tape& t, NodeId x, NodeId gamma, NodeId beta, BatchNormState& state,
                  bool train, double momentum = 0.9, double eps = 1e-5);

// ---- reductions --------------------------------------------------------------
enum class ReduceKind { Sum, Mean, L1Norm, L2Norm };

/// Reduce over `axes` (deduplicated, ascending). Empty axes is the identity.
/// Reduced axes are dropped from the shape; a full reduction yields shape {1}.
NodeId reduce(Tape& t, ReduceKind kind, NodeId x, std::vector<std::int64_t> axes);
NodeId reduce_all(Tape& t, ReduceKind kind, NodeId x);

NodeId global_avg_pool(Tape& t, NodeId x);  // [N,C,H,W] -> [N,C]
NodeId reshape(Tape& t, NodeId x, Shape shape);

// ---- rows ---------------------------------------------------------------------
/// y_i = x_i / (||x_i||_2 + eps) per row of [n,d]. With eps == 0 a zero-norm
/// row raises ZeroNormFactor.
NodeId row_l2_normalize(Tape& t, NodeId x, double eps = 0.0);

// ---- channel gather/scatter ----------------------------------------------------
NodeId gather_channels(Tape& t, NodeId x, std::span<const std::int64_t> channels);

// ---- classification loss --------------------------------------------------------
/// Mean over the batch of -log softmax(logits)[label]; max-stabilized.
NodeId softmax_cross_entropy(Tape& t, NodeId logits, std::span<const int> labels);

// ---- column centering (for CKA) ---------------------------------------------------
NodeId center_columns(Tape& t, NodeId x);  // [n,d] minus per-column mean

}  // namespace iekd::ops
