#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <string>
#include <vector>

#include "pairact/common.hpp"

namespace pairact {

using SubjectId = std::string;

inline constexpr std::size_t kRawJointCount = 32;
inline constexpr std::size_t kPrunedJointCount = 11;
inline constexpr std::size_t kPoseJointCount = 10;  // spine navel dropped after normalization
inline constexpr std::size_t kClassCount = 9;

// Reference joints are fixed by position in the pruned ordering.
inline constexpr std::size_t kSpineNavelSlot = 0;
inline constexpr std::size_t kNeckSlot = 1;

// Frames where the neck collapses onto the spine navel are rejected.
inline constexpr double kEpsilonDegenerate = 1e-6;

struct Joint3D {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline Joint3D operator-(const Joint3D& a, const Joint3D& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Joint3D operator+(const Joint3D& a, const Joint3D& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline double norm(const Joint3D& j) { return std::sqrt(j.x * j.x + j.y * j.y + j.z * j.z); }

struct RawFrame {
  std::vector<Joint3D> joints;  // exactly 32
  std::int64_t timestamp_ns = 0;
  SubjectId subject;
};

struct PrunedFrame {
  std::array<Joint3D, kPrunedJointCount> joints{};  // slot 0 = spine navel, slot 1 = neck
};

// 10x3 matrix, row 0 = neck (unit norm for non-degenerate sources).
struct NormalizedPose {
  std::array<std::array<double, 3>, kPoseJointCount> joints{};
};

enum class ActivityState : int { working = 0, preparing = 1, requesting = 2 };

inline const char* to_string(ActivityState s) {
  switch (s) {
    case ActivityState::working: return "working";
    case ActivityState::preparing: return "preparing";
    case ActivityState::requesting: return "requesting";
  }
  return "?";
}

inline ActivityState activity_state_from_string(const std::string& s) {
  if (s == "working") return ActivityState::working;
  if (s == "preparing") return ActivityState::preparing;
  if (s == "requesting") return ActivityState::requesting;
  data_error("unknown activity state '" + s + "' (expected working|preparing|requesting)");
}

// Ordered pair of single-user states; class index is row-major over
// (left, right) with working=0, preparing=1, requesting=2.
struct PairLabel {
  ActivityState left = ActivityState::working;
  ActivityState right = ActivityState::working;
  int class_index = 0;
};

inline PairLabel encode_pair_label(ActivityState left, ActivityState right) {
  return {left, right, 3 * static_cast<int>(left) + static_cast<int>(right)};
}

inline PairLabel decode_pair_label(int class_index) {
  if (class_index < 0 || class_index >= static_cast<int>(kClassCount))
    data_error("pair-label class index " + std::to_string(class_index) + " out of [0,8]");
  return {static_cast<ActivityState>(class_index / 3), static_cast<ActivityState>(class_index % 3), class_index};
}

inline std::array<double, kClassCount> one_hot(const PairLabel& label) {
  std::array<double, kClassCount> v{};
  v[static_cast<std::size_t>(label.class_index)] = 1.0;
  return v;
}

// Fixed-range min-max rescaling parameters.
struct MinMaxParams {
  double old_min;
  double old_max;
  double new_min;
  double new_max;

  explicit MinMaxParams(double old_min_ = -2.5, double old_max_ = 1.75, double new_min_ = 0.0,
                        double new_max_ = 1.0)
      : old_min(old_min_), old_max(old_max_), new_min(new_min_), new_max(new_max_) {
    if (!(old_min < old_max)) config_error("minmax: old_min must be < old_max");
    if (!(new_min < new_max)) config_error("minmax: new_min must be < new_max");
  }
};

// Source joint indices for pruning 32 -> 11. Position 0 must be the spine
// navel and position 1 the neck; the remaining nine are configuration.
using JointMap = std::array<std::size_t, kPrunedJointCount>;

// Azure Kinect body-tracking ids: spine navel, neck, pelvis, spine chest,
// head, L/R shoulder, L/R elbow, L/R wrist.
inline JointMap default_joint_map() { return {1, 3, 0, 2, 26, 5, 6, 7, 12, 13, 14}; }

inline void validate_joint_map(const JointMap& map) {
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (map[i] >= kRawJointCount)
      config_error("joint map index " + std::to_string(map[i]) + " out of [0,31]");
    for (std::size_t j = i + 1; j < map.size(); ++j)
      if (map[i] == map[j]) config_error("joint map contains duplicate index " + std::to_string(map[i]));
  }
}

inline PrunedFrame prune_frame(const RawFrame& raw, const JointMap& joint_map) {
  if (raw.joints.size() != kRawJointCount)
    data_error("raw frame has " + std::to_string(raw.joints.size()) + " joints, expected 32");
  validate_joint_map(joint_map);
  PrunedFrame out;
  for (std::size_t i = 0; i < kPrunedJointCount; ++i) out.joints[i] = raw.joints[joint_map[i]];
  return out;
}

struct DegenerateFrame : Error {
  DegenerateFrame() : Error(ErrorKind::data, "degenerate frame: neck coincides with spine navel") {}
};

// (J_i - J_0) / ||J_1 - J_0|| for i = 1..10; the identically-zero spine navel
// row is dropped.
inline NormalizedPose normalize_pose(const PrunedFrame& frame) {
  const Joint3D& navel = frame.joints[kSpineNavelSlot];
  const Joint3D& neck = frame.joints[kNeckSlot];
  const double divisor = norm(neck - navel);
  if (!(divisor > kEpsilonDegenerate)) throw DegenerateFrame();
  NormalizedPose pose;
  for (std::size_t i = 1; i < kPrunedJointCount; ++i) {
    const Joint3D d = frame.joints[i] - navel;
    pose.joints[i - 1] = {d.x / divisor, d.y / divisor, d.z / divisor};
  }
  return pose;
}

inline double minmax_scale(double x, const MinMaxParams& p) {
  return (x - p.old_min) / (p.old_max - p.old_min) * (p.new_max - p.new_min) + p.new_min;
}

// Out-of-range inputs are mapped linearly, not clamped; `out_of_range`
// counts how often the fixed range was exceeded.
template <typename It>
inline void minmax_scale_inplace(It first, It last, const MinMaxParams& p, std::size_t* out_of_range = nullptr) {
  for (It it = first; it != last; ++it) {
    const double x = static_cast<double>(*it);
    if (out_of_range && (x < p.old_min || x > p.old_max)) ++*out_of_range;
    *it = static_cast<typename std::iterator_traits<It>::value_type>(minmax_scale(x, p));
  }
}

}  // namespace pairact
