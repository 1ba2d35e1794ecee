#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "joel/dataset.hpp"
#include "joel/matrix.hpp"
#include "joel/nn.hpp"
#include "joel/taxonomy.hpp"

namespace joel {

struct Architecture {
  std::size_t input_dim = 0;
  std::vector<std::size_t> trunk_widths;
  // One rate per trunk layer; a single entry applies to all, empty means none.
  std::vector<double> trunk_dropout;
  double semantic_dropout = 0.0;
  bool batch_norm = false;

  double dropout_for(std::size_t trunk_layer) const;
  // 3 to 8 trunk layers, each 16 to 128 wide.
  bool in_paper_grid() const;

  nlohmann::json to_json() const;
  static Architecture from_json(const nlohmann::json& j);

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// Trunk layers, then the semantic layer (one sigmoid unit per concept), then
// the decision layer (softmax over {legit, fraud}) fed only by the semantic
// activations.
struct JoelNetwork {
  Architecture arch;
  ConceptTaxonomy taxonomy;
  nn::Network layers;
  std::vector<double> concept_thresholds;
  double decision_threshold = 0.5;
  std::uint64_t version = 0;
  double lambda = 1.0;

  std::size_t concept_count() const { return taxonomy.size(); }
  std::size_t semantic_index() const { return layers.size() - 2; }
  std::size_t decision_index() const { return layers.size() - 1; }
  std::size_t trunk_size() const { return layers.size() - 2; }

  // Throws ValidationError when the hierarchy or threshold shapes are broken.
  void validate() const;
};

// Throws ValidationError on an empty taxonomy or zero input dimension.
JoelNetwork build(const Architecture& arch, const ConceptTaxonomy& tax, std::uint64_t seed,
                  double lambda = 1.0);

struct Prediction {
  double fraud_score = 0.0;
  std::vector<double> concept_scores;  // taxonomy order, inside (0, 1)
  std::set<std::size_t> concepts_fired;
  std::uint64_t model_version = 0;
};

struct Scores {
  std::vector<double> fraud;  // per row
  Matrix concepts;            // rows x |S|, clipped to [1e-12, 1 - 1e-12]
};

// Eval-mode scores for a batch of encoded rows.
Scores score(const JoelNetwork& net, const Matrix& x);
Prediction predict(const JoelNetwork& net, std::span<const double> x);
std::vector<Prediction> predict_batch(const JoelNetwork& net, const Matrix& x);

struct JointLoss {
  double decision = 0.0;
  double semantic = 0.0;
  double total = 0.0;
};

JointLoss joint_loss(const Matrix& decision_probs, const Matrix& concept_probs, const Matrix& y,
                     const Matrix& s, double lambda);
// Loss of a forward trace (train/tune) or an eval pass.
JointLoss joint_loss(const JoelNetwork& net, const nn::ForwardTrace& trace, const Matrix& y,
                     const Matrix& s, double lambda);
// Eval-mode loss over a whole set.
JointLoss evaluate_loss(const JoelNetwork& net, const EncodedSet& data, double lambda);

struct JointGradients {
  nn::Gradients grads;
  JointLoss loss;
  // Gradient at the semantic post-activations: the decision branch
  // backpropagated through the decision layer plus lambda times the
  // semantic-loss gradient.
  Matrix d_semantic;
};

// Throws UsageError on an eval-mode trace.
JointGradients joint_backward(const JoelNetwork& net, const nn::ForwardTrace& trace,
                              const Matrix& y, const Matrix& s, double lambda);

struct Calibration {
  std::vector<bool> concept_defaulted;  // single-class concepts left at 0.5
  std::vector<bool> concept_above_max;  // no score met the FPR target
  bool decision_above_max = false;
};

inline constexpr double kDefaultThreshold = 0.5;

// Sets every threshold to the smallest reference score whose FPR stays within
// target (tie groups atomic). When no score qualifies the threshold is placed
// just above the largest score. Throws ValidationError on an empty set or a
// single-class decision label.
Calibration calibrate_thresholds(JoelNetwork& net, const EncodedSet& reference,
                                 double decision_fpr = 0.03, double concept_fpr = 0.20);

// Hex SHA-256 over parameters, thresholds, version and lambda.
std::string model_hash(const JoelNetwork& net);

struct Checkpoint {
  JoelNetwork net;
  std::optional<FeatureCodec> codec;
  nlohmann::json metadata = nlohmann::json::object();  // bootstrap metrics etc.
};

inline constexpr int kCheckpointFormatVersion = 1;

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
// Throws FormatError on a wrong magic or version, ValidationError when
// `expected` is given and its hash differs from the recorded one.
Checkpoint checkpoint_from_json(const nlohmann::json& j,
                                const ConceptTaxonomy* expected = nullptr);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const ConceptTaxonomy* expected = nullptr);

}  // namespace joel
