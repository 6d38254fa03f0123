// Command-line front end: vocabulary and database building, scene generation,
// pipeline runs, evaluation and query benchmarks.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "objslam/binary_io.h"
#include "objslam/config.h"
#include "objslam/database.h"
#include "objslam/errors.h"
#include "objslam/evaluation.h"
#include "objslam/pipeline.h"
#include "objslam/recognition.h"
#include "objslam/scene.h"
#include "objslam/vocabulary.h"

namespace fs = std::filesystem;
using namespace objslam;

namespace {

std::vector<std::string> expand_models(const std::vector<std::string>& args) {
  std::vector<std::string> files;
  for (const auto& a : args) {
    if (fs::is_directory(a)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(a)) {
        if (e.is_regular_file() && e.path().extension() == ".txt") found.push_back(e.path().string());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(a);
    }
  }
  return files;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const size_t lo = static_cast<size_t>(pos);
  const size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Config load_config_or_default(const std::string& path) {
  return path.empty() ? Config{} : read_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Object-aware monocular SLAM toolkit"};
  app.require_subcommand(1);

  std::string corpus, vocab_out;
  int k = 32, levels = 3;
  uint64_t vocab_seed = 0;
  auto* build_vocab = app.add_subcommand("build-vocab", "Train a vocabulary tree from a descriptor corpus");
  build_vocab->add_option("corpus", corpus, "Corpus file")->required();
  build_vocab->add_option("-k", k, "Branching factor");
  build_vocab->add_option("-L", levels, "Depth");
  build_vocab->add_option("--seed", vocab_seed, "Clustering seed");
  build_vocab->add_option("-o", vocab_out, "Output vocabulary")->required();

  std::string db_vocab, db_out;
  std::vector<std::string> db_models;
  auto* build_db = app.add_subcommand("build-db", "Index object models");
  build_db->add_option("vocab", db_vocab, "Vocabulary")->required();
  build_db->add_option("models", db_models, "Model files or directories")->required();
  build_db->add_option("-o", db_out, "Output database")->required();

  std::string scene_config, scene_out;
  auto* gen_scene = app.add_subcommand("gen-scene", "Generate a synthetic scene");
  gen_scene->add_option("config", scene_config, "Config file")->required();
  gen_scene->add_option("-o", scene_out, "Output directory")->required();

  std::string run_vocab, run_db, run_scene, run_out, run_config;
  auto* run = app.add_subcommand("run", "Run the pipeline on a scene");
  run->add_option("vocab", run_vocab, "Vocabulary")->required();
  run->add_option("db", run_db, "Database")->required();
  run->add_option("scene", run_scene, "Scene directory")->required();
  run->add_option("-o", run_out, "Output directory")->required();
  run->add_option("--config", run_config, "Config file (defaults to the scene's config.txt)");

  std::string eval_out, eval_scene, eval_report;
  auto* eval = app.add_subcommand("eval", "Evaluate a run against ground truth");
  eval->add_option("out", eval_out, "Run output directory")->required();
  eval->add_option("scene", eval_scene, "Scene directory")->required();
  eval->add_option("--report", eval_report, "Report file (stdout when omitted)");

  std::string bench_db, bench_frames, bench_vocab, bench_config;
  auto* bench = app.add_subcommand("bench-query", "Per-frame recognition latency");
  bench->add_option("db", bench_db, "Database")->required();
  bench->add_option("frames", bench_frames, "Frames file")->required();
  bench->add_option("--vocab", bench_vocab, "Vocabulary the database was built with")->required();
  bench->add_option("--config", bench_config, "Config file for camera and recognition settings");

  std::string print_config_path;
  auto* print_config = app.add_subcommand("print-config", "Print every config key with its value");
  print_config->add_option("--config", print_config_path, "Config file to merge over the defaults");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*build_vocab) {
      const TrainingSet training = read_training_set(corpus);
      const VocabularyTree vocab = build_vocabulary(training, k, levels, vocab_seed);
      vocab.save(vocab_out);
      std::printf("vocabulary: %zu words, %zu nodes, hash %016llx\n", vocab.word_count(), vocab.node_count(),
                  static_cast<unsigned long long>(vocab.hash()));
    } else if (*build_db) {
      const VocabularyTree vocab = VocabularyTree::load(db_vocab);
      ObjectDatabase db(vocab);
      for (const auto& file : expand_models(db_models)) db.add_model(build_model(read_raw_model(file), vocab));
      db.save(db_out);
      std::printf("database: %zu models\n", db.size());
    } else if (*gen_scene) {
      const Scene scene = generate_scene(read_config(scene_config));
      write_scene(scene_out, scene);
      std::printf("scene: %zu frames, %zu models, %zu instances\n", scene.frames.size(), scene.models.size(),
                  scene.truth.instances.size());
    } else if (*run) {
      const Config config = read_config(run_config.empty() ? (fs::path(run_scene) / "config.txt").string()
                                                           : run_config);
      const VocabularyTree vocab = VocabularyTree::load(run_vocab);
      const ObjectDatabase db = ObjectDatabase::load(run_db, vocab);
      std::vector<Frame> frames = read_frames((fs::path(run_scene) / "frames.txt").string());
      const std::vector<FrameTracks> tracks = read_tracks((fs::path(run_scene) / "tracks.txt").string());
      const PipelineResult result = run_pipeline(vocab, db, std::move(frames), tracks, config);
      write_pipeline_outputs(run_out, result);
      std::printf("run: %zu frames, %zu detections, %zu keyframes, %zu instances\n", result.stats.frames,
                  result.stats.detections, result.map.keyframes.size(), result.map.instances.size());
    } else if (*eval) {
      const GroundTruth gt = read_ground_truth(eval_scene);
      const MapDump map = read_map((fs::path(eval_out) / "map.txt").string());
      const auto dets = parse_detections(read_text_file((fs::path(eval_out) / "detections.txt").string()));
      const std::string report = format_report(evaluate(map, dets, gt));
      if (eval_report.empty()) {
        std::cout << report;
      } else {
        write_text_file(eval_report, report);
      }
    } else if (*bench) {
      const Config config = load_config_or_default(bench_config);
      const VocabularyTree vocab = VocabularyTree::load(bench_vocab);
      const ObjectDatabase db = ObjectDatabase::load(bench_db, vocab);
      std::vector<Frame> frames = read_frames(bench_frames);
      std::vector<double> ms;
      size_t detections = 0;
      for (auto& frame : frames) {
        const auto t0 = std::chrono::steady_clock::now();
        quantize_frame(frame, vocab);
        const FrameRecognition rec = recognize_frame(frame, {}, db, config.camera, config.recognition);
        const auto t1 = std::chrono::steady_clock::now();
        ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        detections += rec.observations.size();
      }
      double mean = 0.0;
      for (double v : ms) mean += v;
      if (!ms.empty()) mean /= static_cast<double>(ms.size());
      std::printf("frames %zu models %zu detections %zu\n", frames.size(), db.size(), detections);
      std::printf("latency_ms mean %.3f p50 %.3f p90 %.3f p99 %.3f max %.3f\n", mean, percentile(ms, 0.5),
                  percentile(ms, 0.9), percentile(ms, 0.99), ms.empty() ? 0.0 : *std::max_element(ms.begin(), ms.end()));
    } else if (*print_config) {
      std::cout << format_config(load_config_or_default(print_config_path));
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "objslam: %s\n", e.what());
    return 1;
  }
  return 0;
}
