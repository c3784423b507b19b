#pragma once

#include <map>
#include <string>
#include <vector>

#include "arl/policy.hpp"

namespace arl {

// Select-Calculate-Erase checkpoint merging:
//   theta_fused = theta_base + (sum_i w_i Delta_i) . C . M   (elementwise)
// with Delta_i = theta_i - theta_base, energy weights w, variance top-p
// selection mask M and sign-consensus erasure mask C.

enum class WeightScope { per_matrix, whole_model };
enum class ConsensusRule { unanimity, majority };

struct MergeConfig {
  double top_p = 1.0;                                         // fraction of coordinates kept by M
  ConsensusRule consensus_rule = ConsensusRule::unanimity;
  WeightScope scope = WeightScope::per_matrix;
};

// One model's task vector: a matrix of differences per parameter matrix.
using DeltaSet = std::map<std::string, Matrix>;
// Binary (0/1-valued) mask with the parameter shapes.
using MaskSet = std::map<std::string, Matrix>;
// weights[name][i] is model i's weight for that matrix; under whole_model
// scope every matrix carries the same weight vector.
using WeightMap = std::map<std::string, std::vector<double>>;

struct TaskVectorSet {
  PolicyParams base;
  std::vector<DeltaSet> deltas;  // K entries, order preserved
};

// Elementwise theta_i - theta_base per matrix. Throws std::invalid_argument
// ("shape_mismatch") when any model disagrees with the base's shapes.
TaskVectorSet task_vectors(const PolicyParams& base, const std::vector<PolicyParams>& models);

// w_i = ||Delta_i||_F^2 / sum_j ||Delta_j||_F^2 within each scope unit.
// A scope unit whose deltas are all zero gets uniform weights 1/K.
WeightMap energy_weights(const std::vector<DeltaSet>& deltas, WeightScope scope);

// Population variance of {Delta_i,d} per coordinate; within each scope unit
// the ceil(top_p * count) highest-variance coordinates get 1 (ties broken by
// coordinate index ascending, matrices in name order under whole_model).
MaskSet variance_topp_mask(const std::vector<DeltaSet>& deltas, double top_p, WeightScope scope);

// s_d = sign(sum_i w_i Delta_i,d). unanimity: C_d = 1 iff every nonzero
// Delta_i,d has sign s_d; majority: C_d = 1 iff the weight mass of agreeing
// nonzero entries exceeds 1/2. Coordinates where every delta is zero get 1.
MaskSet sign_consensus_mask(const std::vector<DeltaSet>& deltas, const WeightMap& weights,
                            ConsensusRule rule);

// theta_base + (sum_i w_i Delta_i) . C . M. Where C.M = 0 the base entry is
// carried over bitwise. Throws std::invalid_argument("shape_mismatch").
PolicyParams fuse(const PolicyParams& base, const std::vector<DeltaSet>& deltas,
                  const WeightMap& weights, const MaskSet& consensus, const MaskSet& selection);

// Full pipeline over checkpoints. Models are first put into a canonical
// order (by a content hash of their task vectors) so the floating-point
// summation order — and therefore the result — is independent of the order
// in which the models are passed.
PolicyParams sce_merge(const PolicyParams& base, const std::vector<PolicyParams>& models,
                       const MergeConfig& cfg);

}  // namespace arl
