#include "arl/merge.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "arl/canonical.hpp"

namespace arl {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(what);
}

double squared_frobenius(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data) s += v * v;
  return s;
}

int sign_of(double v) { return v > 0.0 ? 1 : (v < 0.0 ? -1 : 0); }

// Coordinates of one scope unit in a fixed traversal order: the single
// matrix, or every matrix in name-ascending order for whole_model.
struct Coord {
  const std::string* name;
  std::size_t index;
};

std::vector<std::vector<Coord>> scope_units(const DeltaSet& shape, WeightScope scope) {
  std::vector<std::vector<Coord>> units;
  if (scope == WeightScope::per_matrix) {
    for (const auto& [name, m] : shape) {
      std::vector<Coord> unit;
      for (std::size_t d = 0; d < m.data.size(); ++d) unit.push_back({&name, d});
      units.push_back(std::move(unit));
    }
  } else {
    std::vector<Coord> unit;
    for (const auto& [name, m] : shape) {
      for (std::size_t d = 0; d < m.data.size(); ++d) unit.push_back({&name, d});
    }
    units.push_back(std::move(unit));
  }
  return units;
}

MaskSet zero_mask_like(const DeltaSet& shape) {
  MaskSet m;
  for (const auto& [name, mat] : shape) m.emplace(name, Matrix(mat.rows, mat.cols));
  return m;
}

}  // namespace

TaskVectorSet task_vectors(const PolicyParams& base, const std::vector<PolicyParams>& models) {
  require(!models.empty(), "task_vectors: need at least one model");
  TaskVectorSet out;
  out.base = base;
  for (const auto& model : models) {
    require(model.matrices.size() == base.matrices.size(), "shape_mismatch");
    DeltaSet delta;
    for (const auto& [name, bm] : base.matrices) {
      auto it = model.matrices.find(name);
      require(it != model.matrices.end() && it->second.same_shape(bm), "shape_mismatch");
      Matrix d(bm.rows, bm.cols);
      for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = it->second.data[i] - bm.data[i];
      delta.emplace(name, std::move(d));
    }
    out.deltas.push_back(std::move(delta));
  }
  return out;
}

WeightMap energy_weights(const std::vector<DeltaSet>& deltas, WeightScope scope) {
  require(!deltas.empty(), "energy_weights: need at least one delta");
  std::size_t K = deltas.size();
  WeightMap out;
  if (scope == WeightScope::per_matrix) {
    for (const auto& [name, m] : deltas.front()) {
      std::vector<double> energies(K);
      for (std::size_t i = 0; i < K; ++i) energies[i] = squared_frobenius(deltas[i].at(name));
      double total = std::accumulate(energies.begin(), energies.end(), 0.0);
      std::vector<double> w(K);
      for (std::size_t i = 0; i < K; ++i) {
        w[i] = total > 0.0 ? energies[i] / total : 1.0 / static_cast<double>(K);
      }
      out.emplace(name, std::move(w));
    }
  } else {
    std::vector<double> energies(K, 0.0);
    for (std::size_t i = 0; i < K; ++i) {
      for (const auto& [name, m] : deltas[i]) energies[i] += squared_frobenius(m);
    }
    double total = std::accumulate(energies.begin(), energies.end(), 0.0);
    std::vector<double> w(K);
    for (std::size_t i = 0; i < K; ++i) {
      w[i] = total > 0.0 ? energies[i] / total : 1.0 / static_cast<double>(K);
    }
    for (const auto& [name, m] : deltas.front()) out.emplace(name, w);
  }
  return out;
}

MaskSet variance_topp_mask(const std::vector<DeltaSet>& deltas, double top_p, WeightScope scope) {
  require(!deltas.empty(), "variance_topp_mask: need at least one delta");
  require(top_p > 0.0 && top_p <= 1.0, "variance_topp_mask: top_p must be in (0, 1]");
  std::size_t K = deltas.size();
  MaskSet mask = zero_mask_like(deltas.front());
  if (K == 1) {  // vacuous selection: a single task vector keeps everything
    for (auto& [name, m] : mask) std::fill(m.data.begin(), m.data.end(), 1.0);
    return mask;
  }

  for (const auto& unit : scope_units(deltas.front(), scope)) {
    std::vector<double> variance(unit.size());
    for (std::size_t c = 0; c < unit.size(); ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < K; ++i) mean += deltas[i].at(*unit[c].name).data[unit[c].index];
      mean /= static_cast<double>(K);
      double var = 0.0;
      for (std::size_t i = 0; i < K; ++i) {
        double dev = deltas[i].at(*unit[c].name).data[unit[c].index] - mean;
        var += dev * dev;
      }
      variance[c] = var / static_cast<double>(K);
    }
    auto keep = static_cast<std::size_t>(std::ceil(top_p * static_cast<double>(unit.size())));
    keep = std::min(keep, unit.size());
    std::vector<std::size_t> order(unit.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return variance[a] > variance[b];  // stable: ties fall to lower coordinate index
    });
    for (std::size_t r = 0; r < keep; ++r) {
      const Coord& c = unit[order[r]];
      mask.at(*c.name).data[c.index] = 1.0;
    }
  }
  return mask;
}

MaskSet sign_consensus_mask(const std::vector<DeltaSet>& deltas, const WeightMap& weights,
                            ConsensusRule rule) {
  require(!deltas.empty(), "sign_consensus_mask: need at least one delta");
  std::size_t K = deltas.size();
  MaskSet mask = zero_mask_like(deltas.front());

  for (auto& [name, out] : mask) {
    const std::vector<double>& w = weights.at(name);
    require(w.size() == K, "shape_mismatch");
    for (std::size_t d = 0; d < out.data.size(); ++d) {
      double aggregate = 0.0;
      bool any_nonzero = false;
      for (std::size_t i = 0; i < K; ++i) {
        double v = deltas[i].at(name).data[d];
        aggregate += w[i] * v;
        if (v != 0.0) any_nonzero = true;
      }
      if (!any_nonzero) {
        out.data[d] = 1.0;  // stated convention: untouched coordinates pass
        continue;
      }
      int s = sign_of(aggregate);
      bool keep = false;
      if (rule == ConsensusRule::unanimity) {
        keep = s != 0;
        for (std::size_t i = 0; i < K && keep; ++i) {
          double v = deltas[i].at(name).data[d];
          if (v != 0.0 && sign_of(v) != s) keep = false;
        }
      } else {
        double agreeing = 0.0;
        for (std::size_t i = 0; i < K; ++i) {
          double v = deltas[i].at(name).data[d];
          if (v != 0.0 && sign_of(v) == s) agreeing += w[i];
        }
        keep = agreeing > 0.5;
      }
      out.data[d] = keep ? 1.0 : 0.0;
    }
  }
  return mask;
}

PolicyParams fuse(const PolicyParams& base, const std::vector<DeltaSet>& deltas,
                  const WeightMap& weights, const MaskSet& consensus, const MaskSet& selection) {
  require(!deltas.empty(), "fuse: need at least one delta");
  PolicyParams out = base;
  for (auto& [name, m] : out.matrices) {
    const std::vector<double>& w = weights.at(name);
    const Matrix& c = consensus.at(name);
    const Matrix& sel = selection.at(name);
    require(c.same_shape(m) && sel.same_shape(m) && w.size() == deltas.size(), "shape_mismatch");
    for (const auto& d : deltas) require(d.at(name).same_shape(m), "shape_mismatch");
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      if (c.data[i] * sel.data[i] == 0.0) continue;  // base entry carried over bitwise
      double agg = 0.0;
      for (std::size_t k = 0; k < deltas.size(); ++k) {
        agg += w[k] * deltas[k].at(name).data[i];
      }
      m.data[i] = base.matrices.at(name).data[i] + agg;
    }
  }
  return out;
}

PolicyParams sce_merge(const PolicyParams& base, const std::vector<PolicyParams>& models,
                       const MergeConfig& cfg) {
  TaskVectorSet tv = task_vectors(base, models);

  // K=1 with a full selection mask is the identity merge: both masks are all
  // ones and the single weight is 1, so theta_fused = theta_1. Returning the
  // model directly keeps the identity bitwise (base + (theta_1 - base) may
  // round in floating point).
  if (models.size() == 1 && cfg.top_p == 1.0) return models.front();

  // Canonical model order: sort by a content hash of each task vector so
  // the summation order (and the exact result) does not depend on argument
  // order. Identical deltas compare equal and contribute identically.
  std::vector<std::size_t> order(tv.deltas.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> digest(tv.deltas.size());
  for (std::size_t i = 0; i < tv.deltas.size(); ++i) {
    std::vector<std::uint8_t> bytes;
    for (const auto& [name, m] : tv.deltas[i]) {
      bytes.insert(bytes.end(), name.begin(), name.end());
      for (double v : m.data) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        for (int s = 0; s < 64; s += 8) bytes.push_back(static_cast<std::uint8_t>(bits >> s));
      }
    }
    digest[i] = fnv1a64(bytes);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return digest[a] < digest[b]; });
  std::vector<DeltaSet> deltas;
  for (std::size_t i : order) deltas.push_back(std::move(tv.deltas[i]));

  MaskSet selection = variance_topp_mask(deltas, cfg.top_p, cfg.scope);
  WeightMap weights = energy_weights(deltas, cfg.scope);
  MaskSet consensus = sign_consensus_mask(deltas, weights, cfg.consensus_rule);
  return fuse(base, deltas, weights, consensus, selection);
}

}  // namespace arl
