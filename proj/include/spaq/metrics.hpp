#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "spaq/finetune.hpp"
#include "spaq/graph.hpp"

namespace spaq::metrics {

/// Scores a graph; lower is better. Implementations must be deterministic
/// for a fixed graph.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual double evaluate(const GraphF& graph) const = 0;
  /// Whether evaluate may be called concurrently.
  virtual bool parallel_safe() const = 0;
  virtual std::string id() const = 0;
};

/// Pooled RMSE of all graph outputs against the task targets over the
/// task's fixed sample set.
class SyntheticEvaluator final : public Evaluator {
 public:
  explicit SyntheticEvaluator(train::SyntheticTask task) : task_(task) {}
  double evaluate(const GraphF& graph) const override;
  bool parallel_safe() const override { return true; }
  std::string id() const override;
  const train::SyntheticTask& task() const { return task_; }

 private:
  train::SyntheticTask task_;
};

std::unique_ptr<Evaluator> synthetic_evaluator(const train::SyntheticTask& task);

/// RMSE over every element of `outputs` against `targets` (same keys).
double pooled_rmse(const GraphF& graph, const TensorMap<float>& outputs, const TensorMap<float>& targets);

// ---------------------------------------------------------------------------
// Trajectories

struct Pose {
  double timestamp = 0.0;
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();
};

struct Trajectory {
  std::vector<Pose> poses;
  std::size_t size() const { return poses.size(); }
};

inline constexpr double kQuaternionTolerance = 1e-6;
inline constexpr double kAssociationTolerance = 0.02;

/// Timestamps strictly increasing, quaternions unit-norm within tolerance.
void check_trajectory(const Trajectory& t);

/// `timestamp tx ty tz qx qy qz qw` per line; `#` starts a comment.
Trajectory parse_tum(std::istream& in);
Trajectory read_tum(const std::filesystem::path& path);
/// Shortest round-trip decimal form, so parse_tum(format_tum(t)) == t.
std::string format_tum(const Trajectory& t);
void write_tum(const std::filesystem::path& path, const Trajectory& t);

/// Nearest-timestamp matching within `max_dt` seconds; each gt sample is
/// used at most once. Returns (est index, gt index) pairs.
std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est, const Trajectory& gt,
                                                           double max_dt = kAssociationTolerance);

enum class AlignMode { kRigid, kSimilarity };
const char* to_string(AlignMode mode);
AlignMode align_mode_from_string(const std::string& name);

struct Alignment {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double scale = 1.0;
  /// Associated estimate positions mapped into the ground-truth frame.
  std::vector<Eigen::Vector3d> aligned;
  std::vector<double> residuals;
  std::vector<std::pair<std::size_t, std::size_t>> matches;

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return scale * (rotation * p) + translation; }
};

/// Least-squares s, R, t minimizing sum |s R p_est + t - p_gt|^2.
Alignment align(const Trajectory& est, const Trajectory& gt, AlignMode mode = AlignMode::kSimilarity);

double ate_rmse(const Trajectory& est, const Trajectory& gt, AlignMode mode = AlignMode::kSimilarity);

/// Spearman rank correlation (average ranks for ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace spaq::metrics
