#pragma once

#include <array>
#include <chrono>
#include <string>

namespace objslam {

enum class Stage {
  kRegioning,
  kQuery,
  kCorrespondence,
  kDisac,
  kRefinement,
  kAssociation,
  kTriangulation,
  kBundleAdjustment,
};

inline constexpr int kStageCount = 8;

const char* stage_name(Stage stage);

// Wall-clock accumulator. Time between switch_to() calls is charged to the
// currently active stage, so the per-stage totals always sum to the elapsed
// time since start().
class StageClock {
 public:
  using Clock = std::chrono::steady_clock;

  void start(Stage initial);
  void switch_to(Stage stage);
  void stop();

  double seconds(Stage stage) const { return totals_[static_cast<int>(stage)]; }
  double total_seconds() const;
  bool running() const { return running_; }
  Stage current() const { return current_; }

  std::string report() const;

 private:
  std::array<double, kStageCount> totals_{};
  Clock::time_point mark_{};
  Stage current_ = Stage::kRegioning;
  bool running_ = false;
};

// Switches the clock to `stage` for the scope and restores the previous stage.
class StageScope {
 public:
  StageScope(StageClock* clock, Stage stage) : clock_(clock) {
    if (clock_ && clock_->running()) {
      previous_ = clock_->current();
      clock_->switch_to(stage);
    } else {
      clock_ = nullptr;
    }
  }
  ~StageScope() {
    if (clock_) clock_->switch_to(previous_);
  }
  StageScope(const StageScope&) = delete;
  StageScope& operator=(const StageScope&) = delete;

 private:
  StageClock* clock_;
  Stage previous_ = Stage::kRegioning;
};

}  // namespace objslam
