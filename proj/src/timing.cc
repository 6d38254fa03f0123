#include "objslam/timing.h"

#include <cstdio>

namespace objslam {

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::kRegioning:
      return "regioning";
    case Stage::kQuery:
      return "query";
    case Stage::kCorrespondence:
      return "correspondence";
    case Stage::kDisac:
      return "disac";
    case Stage::kRefinement:
      return "refinement";
    case Stage::kAssociation:
      return "association";
    case Stage::kTriangulation:
      return "triangulation";
    case Stage::kBundleAdjustment:
      return "bundle_adjustment";
  }
  return "?";
}

void StageClock::start(Stage initial) {
  totals_.fill(0.0);
  current_ = initial;
  mark_ = Clock::now();
  running_ = true;
}

void StageClock::switch_to(Stage stage) {
  if (!running_) return;
  const auto now = Clock::now();
  totals_[static_cast<int>(current_)] += std::chrono::duration<double>(now - mark_).count();
  mark_ = now;
  current_ = stage;
}

void StageClock::stop() {
  if (!running_) return;
  switch_to(current_);
  running_ = false;
}

double StageClock::total_seconds() const {
  double sum = 0.0;
  for (double t : totals_) sum += t;
  return sum;
}

std::string StageClock::report() const {
  std::string out;
  char line[96];
  for (int i = 0; i < kStageCount; ++i) {
    std::snprintf(line, sizeof(line), "%s %.6f\n", stage_name(static_cast<Stage>(i)), totals_[i]);
    out += line;
  }
  std::snprintf(line, sizeof(line), "total %.6f\n", total_seconds());
  out += line;
  return out;
}

}  // namespace objslam
