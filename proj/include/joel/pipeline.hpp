#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "joel/annotate.hpp"
#include "joel/dataset.hpp"
#include "joel/model.hpp"
#include "joel/taxonomy.hpp"
#include "joel/trainer.hpp"

namespace joel {

// Bootstrap configuration: how to split, preprocess and which grid to run.
struct PipelineConfig {
  // Explicit boundaries win over fractions of the sorted timestamps.
  std::optional<SplitSpec> split;
  std::array<double, 3> split_fractions{0.6, 0.75, 0.9};
  double undersample_keep_rate = 1.0;
  std::uint64_t seed = 0;
  std::size_t top_k = 100;
  EvalTargets targets;
  std::size_t threads = 1;
  std::vector<GridEntry> grid;

  // Grid file keys: "split" {train_end, val_end, test_end, prod_end} or
  // "split_fractions" [a, b, c], "undersample_keep_rate", "seed", "top_k",
  // "decision_fpr", "concept_fpr", "threads", plus the grid_from_json keys.
  static PipelineConfig from_json(const nlohmann::json& j);
};

struct PipelineResult {
  SplitSpec split;
  std::size_t dropped = 0;
  AnnotationResult annotation;  // events cleared to save memory
  FeatureCodec codec;
  std::array<std::size_t, 4> split_sizes{};  // after undersampling train
  std::vector<GridResult> results;
  nlohmann::json selection;
  Checkpoint selected;  // codec embedded, test/production metrics as metadata
};

// Distant supervision, temporal split, negative undersampling of train,
// codec fit on train, grid search and selection.
PipelineResult run_pipeline(const RawTable& events, const RuleConceptMapping& mapping,
                            const ConceptTaxonomy& tax, const PipelineConfig& cfg);
// Same, starting from already annotated events.
PipelineResult run_pipeline(const FeatureSchema& schema, std::vector<AnnotatedEvent> annotated,
                            const ConceptTaxonomy& tax, const PipelineConfig& cfg);

// codec.json, <name>.ckpt.json per successful entry, selected.ckpt.json,
// selection.json and metrics/<name>.json.
void write_pipeline_outputs(const PipelineResult& result, const std::filesystem::path& dir);

}  // namespace joel
