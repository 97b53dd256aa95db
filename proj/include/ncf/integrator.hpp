#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ncf/common.hpp"

namespace ncf {

enum class Scheme { FixedEuler, AdaptiveEuler };

/// Explicit Euler integration settings. Exactly one of t_end / n_steps is used
/// (n_steps wins when both are set).
struct IntegratorConfig {
  Scheme scheme = Scheme::FixedEuler;
  double step = 1e-3;
  double max_step = 0.0;  // AdaptiveEuler cap; 0 means 64 * step
  double min_step = 1e-14;
  int growth_after = 50;  // clean steps before the step doubles
  double guard_tol = 1e-12;
  std::optional<double> t_end;
  std::optional<long> n_steps;
  int record_every = 1;  // full snapshot cadence
  std::uint64_t seed = 0;
  double kink_tol = 1e-12;

  void validate() const;
  static IntegratorConfig fixed(double step, long n_steps, int record_every = 1);
  static IntegratorConfig fixed_until(double step, double t_end, int record_every = 1);
};

struct Record {
  double t = 0.0;
  long step = 0;
  double loss = 0.0;  // monitored objective: training loss, or N(u) for NCF flows
  double norm = 0.0;
  Vec block_norms;
  Vec block_cos;
  bool kink = false;
  std::optional<Vec> w;  // thinned snapshot
};

struct TrajectoryMetadata {
  std::uint64_t model_hash = 0;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  bool degenerate = false;
  std::map<std::string, std::string> notes;
};

/// Time-stamped flow output. Scalars are kept for every accepted step; full
/// weight snapshots every `record_every` steps plus the first and last.
class Trajectory {
 public:
  std::vector<Record> records;
  TrajectoryMetadata meta;

  bool empty() const { return records.empty(); }
  const Record& front() const { return records.front(); }
  const Record& back() const { return records.back(); }
  const Vec& initial_w() const { return *records.front().w; }
  const Vec& final_w() const { return *records.back().w; }

  /// Indices of records that carry a weight snapshot.
  std::vector<std::size_t> snapshot_indices() const;
  std::size_t accepted_steps() const { return records.empty() ? 0 : records.size() - 1; }
};

/// Raised when integration cannot continue; carries the trajectory so far.
class FlowError : public Error {
 public:
  FlowError(const std::string& what, Trajectory partial)
      : Error(what), partial_(std::move(partial)) {}
  const Trajectory& partial() const { return partial_; }

 private:
  Trajectory partial_;
};

class StiffnessError : public FlowError {
 public:
  using FlowError::FlowError;
};

class DivergenceError : public FlowError {
 public:
  using FlowError::FlowError;
};

/// Right-hand side and bookkeeping for one flow.
struct FlowSystem {
  std::function<Vec(double t, const Vec& w)> velocity;
  std::function<double(const Vec& w)> objective;
  /// +1: objective should not decrease (ascent), -1: should not increase.
  int monotone_sign = -1;
  std::function<bool(const Vec& w)> near_kink;
  std::vector<std::pair<Index, Index>> blocks;  // (offset, length)
  std::vector<Vec> reference_dirs;               // per block; empty = initial direction
};

using StepObserver = std::function<void(long step, double t, const Vec& w)>;

Trajectory integrate(const FlowSystem& system, const Vec& w0, const IntegratorConfig& config,
                     const StepObserver& observer = {});

}  // namespace ncf
