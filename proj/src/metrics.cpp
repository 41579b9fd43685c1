#include "spaq/metrics.hpp"

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <tuple>

namespace spaq::metrics {

double pooled_rmse(const GraphF& graph, const TensorMap<float>& outputs, const TensorMap<float>& targets) {
  const auto v = train::squared_error(graph, outputs, targets);
  return std::sqrt(v.mse());
}

double SyntheticEvaluator::evaluate(const GraphF& graph) const {
  const auto data = train::make_dataset(graph, task_);
  std::vector<std::size_t> rows(data.samples.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const auto outputs = forward(graph, train::batch_inputs(data, rows));
  return pooled_rmse(graph, outputs, train::batch_targets(data, rows));
}

std::string SyntheticEvaluator::id() const {
  std::ostringstream os;
  os << "synthetic/" << train::to_string(task_.target) << "/seed=" << task_.seed << "/res="
     << task_.resolution.height << "x" << task_.resolution.width << "/n=" << task_.samples;
  return os.str();
}

std::unique_ptr<Evaluator> synthetic_evaluator(const train::SyntheticTask& task) {
  if (task.samples <= 0) fail(ErrorCode::kInvalidArgument, "task needs at least one sample");
  return std::make_unique<SyntheticEvaluator>(task);
}

// ---------------------------------------------------------------------------

void check_trajectory(const Trajectory& t) {
  for (std::size_t i = 0; i < t.poses.size(); ++i) {
    const auto& p = t.poses[i];
    if (i > 0 && !(p.timestamp > t.poses[i - 1].timestamp)) {
      fail(ErrorCode::kInvalidArgument, "timestamps must be strictly increasing (sample " + std::to_string(i) + ")");
    }
    if (std::abs(p.orientation.norm() - 1.0) > kQuaternionTolerance) {
      fail(ErrorCode::kInvalidArgument, "quaternion of sample " + std::to_string(i) + " is not unit-norm");
    }
  }
}

Trajectory parse_tum(std::istream& in) {
  Trajectory t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::vector<double> v;
    const char* p = line.data();
    const char* end = p + line.size();
    while (true) {
      while (p < end && (*p == ' ' || *p == '\t' || *p == '\r')) ++p;
      if (p == end) break;
      const char* tok_end = p;
      while (tok_end < end && *tok_end != ' ' && *tok_end != '\t' && *tok_end != '\r') ++tok_end;
      double x = 0.0;
      const auto res = std::from_chars(p, tok_end, x);
      if (res.ec != std::errc() || res.ptr != tok_end) {
        fail(ErrorCode::kParse, "line " + std::to_string(line_no) + ": bad number '" + std::string(p, tok_end) + "'");
      }
      v.push_back(x);
      p = tok_end;
    }
    if (v.empty()) continue;
    if (v.size() != 8) {
      fail(ErrorCode::kParse, "line " + std::to_string(line_no) + ": expected 8 fields, got " + std::to_string(v.size()));
    }
    Pose pose;
    pose.timestamp = v[0];
    pose.position = {v[1], v[2], v[3]};
    pose.orientation = Eigen::Quaterniond(v[7], v[4], v[5], v[6]);
    t.poses.push_back(pose);
  }
  try {
    check_trajectory(t);
  } catch (const Error& e) {
    fail(ErrorCode::kParse, e.what());
  }
  return t;
}

Trajectory read_tum(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  return parse_tum(f);
}

namespace {

void append_double(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

}  // namespace

std::string format_tum(const Trajectory& t) {
  std::string out;
  for (const auto& p : t.poses) {
    const double fields[8] = {p.timestamp,        p.position.x(),    p.position.y(),    p.position.z(),
                              p.orientation.x(), p.orientation.y(), p.orientation.z(), p.orientation.w()};
    for (int i = 0; i < 8; ++i) {
      if (i) out.push_back(' ');
      append_double(out, fields[i]);
    }
    out.push_back('\n');
  }
  return out;
}

void write_tum(const std::filesystem::path& path, const Trajectory& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  f << format_tum(t);
}

std::vector<std::pair<std::size_t, std::size_t>> associate(const Trajectory& est, const Trajectory& gt, double max_dt) {
  // Closest pairs first, each sample on either side used once.
  struct Candidate {
    double dt;
    std::size_t e, g;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double ts = est.poses[i].timestamp;
    auto it = std::lower_bound(gt.poses.begin(), gt.poses.end(), ts - max_dt,
                               [](const Pose& p, double t) { return p.timestamp < t; });
    for (; it != gt.poses.end() && it->timestamp <= ts + max_dt; ++it) {
      const double dt = std::abs(it->timestamp - ts);
      if (dt <= max_dt) cands.push_back({dt, i, static_cast<std::size_t>(it - gt.poses.begin())});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.dt, a.e, a.g) < std::tie(b.dt, b.e, b.g);
  });
  std::vector<bool> est_used(est.size(), false), gt_used(gt.size(), false);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (const auto& c : cands) {
    if (est_used[c.e] || gt_used[c.g]) continue;
    est_used[c.e] = gt_used[c.g] = true;
    out.emplace_back(c.e, c.g);
  }
  std::sort(out.begin(), out.end());
  return out;
}

const char* to_string(AlignMode mode) { return mode == AlignMode::kRigid ? "rigid" : "similarity"; }

AlignMode align_mode_from_string(const std::string& name) {
  if (name == "rigid" || name == "se3") return AlignMode::kRigid;
  if (name == "similarity" || name == "sim3") return AlignMode::kSimilarity;
  fail(ErrorCode::kInvalidArgument, "unknown alignment mode '" + name + "'");
}

namespace {

bool spans_plane(const Eigen::Matrix3Xd& pts) {
  const Eigen::Vector3d mean = pts.rowwise().mean();
  const Eigen::Matrix3Xd centered = pts.colwise() - mean;
  const Eigen::Vector3d sv = Eigen::JacobiSVD<Eigen::Matrix3Xd>(centered).singularValues();
  return sv[0] > 0.0 && sv[1] > 1e-9 * sv[0];
}

}  // namespace

Alignment align(const Trajectory& est, const Trajectory& gt, AlignMode mode) {
  check_trajectory(est);
  check_trajectory(gt);
  Alignment a;
  a.matches = associate(est, gt);
  const auto n = static_cast<Index>(a.matches.size());
  if (n < 3) {
    fail(ErrorCode::kDegenerateAlignment, "need at least 3 associated samples, got " + std::to_string(n));
  }
  Eigen::Matrix3Xd src(3, n), dst(3, n);
  for (Index i = 0; i < n; ++i) {
    src.col(i) = est.poses[a.matches[static_cast<std::size_t>(i)].first].position;
    dst.col(i) = gt.poses[a.matches[static_cast<std::size_t>(i)].second].position;
  }
  if (!spans_plane(src) || !spans_plane(dst)) {
    fail(ErrorCode::kDegenerateAlignment, "associated positions are collinear");
  }
  const Eigen::Matrix4d T = Eigen::umeyama(src, dst, mode == AlignMode::kSimilarity);
  const Eigen::Matrix3d sr = T.topLeftCorner<3, 3>();
  a.scale = mode == AlignMode::kSimilarity ? sr.col(0).norm() : 1.0;
  a.rotation = sr / a.scale;
  a.translation = T.topRightCorner<3, 1>();
  a.aligned.reserve(static_cast<std::size_t>(n));
  a.residuals.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Eigen::Vector3d p = a.apply(src.col(i));
    a.aligned.push_back(p);
    a.residuals.push_back((p - dst.col(i)).norm());
  }
  return a;
}

double ate_rmse(const Trajectory& est, const Trajectory& gt, AlignMode mode) {
  const Alignment a = align(est, gt, mode);
  double sq = 0.0;
  for (double r : a.residuals) sq += r * r;
  return std::sqrt(sq / static_cast<double>(a.residuals.size()));
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    fail(ErrorCode::kInvalidArgument, "spearman needs two equal-length series of at least 2 values");
  }
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace spaq::metrics
