#pragma once

#include <functional>
#include <string>
#include <vector>

#include "objslam/config.h"
#include "objslam/database.h"
#include "objslam/map.h"
#include "objslam/recognition.h"
#include "objslam/scene.h"
#include "objslam/timing.h"
#include "objslam/vocabulary.h"

namespace objslam {

// Called once per frame with the verified detections; may append or edit them
// before they reach the back end.
using InjectionHook = std::function<void(const Frame&, const MapState&, std::vector<Observation>&)>;

struct PipelineStats {
  size_t frames = 0;
  size_t detections = 0;
  size_t accumulated = 0;
  size_t triangulations = 0;
  size_t local_ba = 0;
  size_t global_ba = 0;
};

struct PipelineResult {
  MapState map;
  std::vector<DetectionRecord> detections;
  StageClock clock;
  PipelineStats stats;
};

// Processes every frame in order on the calling thread. Frames are quantized
// with `vocab`, which must be the vocabulary `db` was built with.
PipelineResult run_pipeline(const VocabularyTree& vocab, const ObjectDatabase& db, std::vector<Frame> frames,
                            const std::vector<FrameTracks>& tracks, const Config& config,
                            const InjectionHook& hook = {});

// map.txt, detections.txt, keyframes.txt (trajectory format) and timings.txt.
void write_pipeline_outputs(const std::string& dir, const PipelineResult& result);

}  // namespace objslam
