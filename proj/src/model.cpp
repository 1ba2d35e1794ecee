#include "joel/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "joel/error.hpp"
#include "joel/io_util.hpp"
#include "joel/metrics.hpp"

namespace joel {

using nlohmann::json;

double Architecture::dropout_for(std::size_t trunk_layer) const {
  if (trunk_dropout.empty()) return 0.0;
  if (trunk_dropout.size() == 1) return trunk_dropout.front();
  return trunk_dropout.at(trunk_layer);
}

bool Architecture::in_paper_grid() const {
  if (trunk_widths.size() < 3 || trunk_widths.size() > 8) return false;
  return std::all_of(trunk_widths.begin(), trunk_widths.end(),
                     [](std::size_t w) { return w >= 16 && w <= 128; });
}

json Architecture::to_json() const {
  return {{"input_dim", input_dim},
          {"trunk_widths", trunk_widths},
          {"trunk_dropout", trunk_dropout},
          {"semantic_dropout", semantic_dropout},
          {"batch_norm", batch_norm}};
}

Architecture Architecture::from_json(const json& j) {
  Architecture a;
  a.input_dim = j.value("input_dim", std::size_t{0});
  a.trunk_widths = j.at("trunk_widths").get<std::vector<std::size_t>>();
  if (j.contains("trunk_dropout")) {
    const json& d = j.at("trunk_dropout");
    a.trunk_dropout = d.is_array() ? d.get<std::vector<double>>() : std::vector<double>{d.get<double>()};
  }
  a.semantic_dropout = j.value("semantic_dropout", 0.0);
  a.batch_norm = j.value("batch_norm", false);
  return a;
}

void JoelNetwork::validate() const {
  if (taxonomy.empty()) throw ValidationError("network has no taxonomy");
  if (layers.size() < 2) throw ValidationError("network needs a semantic and a decision layer");
  nn::validate(layers);
  const nn::DenseLayer& sem = layers[semantic_index()];
  const nn::DenseLayer& dec = layers[decision_index()];
  if (sem.out_dim() != concept_count()) {
    throw ValidationError("semantic layer width " + std::to_string(sem.out_dim()) +
                          " != taxonomy size " + std::to_string(concept_count()));
  }
  if (sem.activation != nn::Activation::sigmoid) {
    throw ValidationError("semantic layer must use sigmoid");
  }
  if (dec.in_dim() != concept_count()) {
    throw ValidationError("decision layer reads " + std::to_string(dec.in_dim()) +
                          " inputs, expected the " + std::to_string(concept_count()) +
                          " semantic outputs");
  }
  if (dec.out_dim() != kNumDecisions || dec.activation != nn::Activation::softmax) {
    throw ValidationError("decision layer must be a 2-way softmax");
  }
  if (concept_thresholds.size() != concept_count()) {
    throw ValidationError("concept threshold count != taxonomy size");
  }
}

JoelNetwork build(const Architecture& arch, const ConceptTaxonomy& tax, std::uint64_t seed,
                  double lambda) {
  if (tax.empty()) throw ValidationError("taxonomy must be non-empty");
  if (arch.input_dim == 0) throw ValidationError("input_dim must be positive");
  if (!arch.trunk_dropout.empty() && arch.trunk_dropout.size() != 1 &&
      arch.trunk_dropout.size() != arch.trunk_widths.size()) {
    throw ValidationError("trunk_dropout needs one rate or one per trunk layer");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be >= 0");
  std::vector<nn::LayerSpec> specs;
  for (std::size_t i = 0; i < arch.trunk_widths.size(); ++i) {
    specs.push_back({arch.trunk_widths[i], nn::Activation::relu, arch.dropout_for(i),
                     arch.batch_norm});
  }
  specs.push_back({tax.size(), nn::Activation::sigmoid, arch.semantic_dropout, false});
  specs.push_back({kNumDecisions, nn::Activation::softmax, 0.0, false});

  JoelNetwork net;
  net.arch = arch;
  net.taxonomy = tax;
  net.layers = nn::init_network(specs, arch.input_dim, seed);
  net.concept_thresholds.assign(tax.size(), kDefaultThreshold);
  net.lambda = lambda;
  net.validate();
  return net;
}

namespace {

double clip_prob(double p) { return std::clamp(p, nn::kProbClip, 1.0 - nn::kProbClip); }

Scores scores_from_trace(const JoelNetwork& net, const nn::ForwardTrace& trace) {
  const Matrix& sem = trace.activated(net.semantic_index());
  const Matrix& dec = trace.output();
  Scores s;
  s.fraud.resize(dec.rows());
  for (std::size_t r = 0; r < dec.rows(); ++r) s.fraud[r] = dec(r, kFraudClass);
  s.concepts = sem;
  for (double& v : s.concepts.flat()) v = clip_prob(v);
  return s;
}

}  // namespace

Scores score(const JoelNetwork& net, const Matrix& x) {
  return scores_from_trace(net, nn::forward(net.layers, x, nn::Mode::eval));
}

std::vector<Prediction> predict_batch(const JoelNetwork& net, const Matrix& x) {
  const Scores s = score(net, x);
  std::vector<Prediction> out(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Prediction& p = out[r];
    p.fraud_score = s.fraud[r];
    const auto row = s.concepts.row(r);
    p.concept_scores.assign(row.begin(), row.end());
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (row[c] >= net.concept_thresholds[c]) p.concepts_fired.insert(c);
    }
    p.model_version = net.version;
  }
  return out;
}

Prediction predict(const JoelNetwork& net, std::span<const double> x) {
  Matrix m(1, x.size());
  std::copy(x.begin(), x.end(), m.row(0).begin());
  return std::move(predict_batch(net, m).front());
}

JointLoss joint_loss(const Matrix& decision_probs, const Matrix& concept_probs, const Matrix& y,
                     const Matrix& s, double lambda) {
  JointLoss l;
  l.decision = nn::cross_entropy(decision_probs, y);
  l.semantic = nn::binary_cross_entropy(concept_probs, s);
  l.total = l.decision + lambda * l.semantic;
  return l;
}

JointLoss joint_loss(const JoelNetwork& net, const nn::ForwardTrace& trace, const Matrix& y,
                     const Matrix& s, double lambda) {
  return joint_loss(trace.output(), trace.activated(net.semantic_index()), y, s, lambda);
}

JointLoss evaluate_loss(const JoelNetwork& net, const EncodedSet& data, double lambda) {
  if (data.size() == 0) throw ValidationError("cannot evaluate loss on an empty set");
  const nn::ForwardTrace t = nn::forward(net.layers, data.x, nn::Mode::eval);
  return joint_loss(net, t, data.decision_targets(), data.concepts, lambda);
}

JointGradients joint_backward(const JoelNetwork& net, const nn::ForwardTrace& trace,
                              const Matrix& y, const Matrix& s, double lambda) {
  if (trace.mode == nn::Mode::eval) {
    throw UsageError("joint_backward needs a train- or tune-mode trace");
  }
  const Matrix& sem = trace.activated(net.semantic_index());
  JointGradients out;
  out.loss = joint_loss(trace.output(), sem, y, s, lambda);
  const Matrix g_out = nn::cross_entropy_grad(trace.output(), y);
  Matrix g_sem;
  std::vector<nn::GradInjection> inj;
  if (lambda != 0.0) {
    g_sem = nn::binary_cross_entropy_grad(sem, s);
    for (double& v : g_sem.flat()) v *= lambda;
    inj.push_back({net.semantic_index(), &g_sem});
  }
  out.grads = nn::backward(net.layers, trace, g_out, inj);
  out.d_semantic = out.grads.d_activated.at(net.semantic_index() + 1);
  return out;
}

namespace {

double calibrated_threshold(std::span<const double> scores, std::span<const int> labels,
                            double target, bool& above_max) {
  const OperatingPoint op = operating_point_at_fpr(scores, labels, target);
  above_max = !op.threshold.has_value();
  if (op.threshold) return *op.threshold;
  const double top = *std::max_element(scores.begin(), scores.end());
  return std::nextafter(top, std::numeric_limits<double>::infinity());
}

}  // namespace

Calibration calibrate_thresholds(JoelNetwork& net, const EncodedSet& reference,
                                 double decision_fpr, double concept_fpr) {
  if (reference.size() == 0) throw ValidationError("calibration set is empty");
  const std::size_t pos = reference.positives();
  if (pos == 0 || pos == reference.size()) {
    throw ValidationError("calibration set needs both decision classes");
  }
  const Scores s = score(net, reference.x);
  Calibration cal;
  net.decision_threshold =
      calibrated_threshold(s.fraud, reference.labels, decision_fpr, cal.decision_above_max);

  const std::size_t n = reference.size();
  const std::size_t k = net.concept_count();
  cal.concept_defaulted.assign(k, false);
  cal.concept_above_max.assign(k, false);
  std::vector<double> col(n);
  std::vector<int> lab(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t p = 0;
    for (std::size_t r = 0; r < n; ++r) {
      col[r] = s.concepts(r, c);
      lab[r] = reference.concepts(r, c) > 0.5 ? 1 : 0;
      p += static_cast<std::size_t>(lab[r]);
    }
    if (p == 0 || p == n) {
      net.concept_thresholds[c] = kDefaultThreshold;
      cal.concept_defaulted[c] = true;
      continue;
    }
    bool above = false;
    net.concept_thresholds[c] = calibrated_threshold(col, lab, concept_fpr, above);
    cal.concept_above_max[c] = above;
  }
  return cal;
}

namespace {

json layer_to_json(const nn::DenseLayer& l) {
  json j{{"rows", l.W.rows()},
         {"cols", l.W.cols()},
         {"W", std::vector<double>(l.W.flat().begin(), l.W.flat().end())},
         {"b", l.b},
         {"activation", nn::to_string(l.activation)},
         {"dropout", l.dropout_rate},
         {"frozen", l.frozen}};
  if (l.bn) {
    j["bn"] = {{"gamma", l.bn->gamma},
               {"beta", l.bn->beta},
               {"running_mean", l.bn->running_mean},
               {"running_var", l.bn->running_var},
               {"momentum", l.bn->momentum},
               {"epsilon", l.bn->epsilon}};
  } else {
    j["bn"] = nullptr;
  }
  return j;
}

nn::DenseLayer layer_from_json(const json& j) {
  nn::DenseLayer l;
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const auto w = j.at("W").get<std::vector<double>>();
  if (w.size() != rows * cols) throw FormatError("checkpoint: W has the wrong size");
  l.W = Matrix(rows, cols);
  std::copy(w.begin(), w.end(), l.W.flat().begin());
  l.b = j.at("b").get<std::vector<double>>();
  l.activation = nn::activation_from_string(j.at("activation").get<std::string>());
  l.dropout_rate = j.value("dropout", 0.0);
  l.frozen = j.value("frozen", false);
  const json& bn = j.at("bn");
  if (!bn.is_null()) {
    nn::BatchNorm b;
    b.gamma = bn.at("gamma").get<std::vector<double>>();
    b.beta = bn.at("beta").get<std::vector<double>>();
    b.running_mean = bn.at("running_mean").get<std::vector<double>>();
    b.running_var = bn.at("running_var").get<std::vector<double>>();
    b.momentum = bn.value("momentum", nn::BatchNorm::kMomentum);
    b.epsilon = bn.value("epsilon", nn::BatchNorm::kEpsilon);
    l.bn = std::move(b);
  }
  return l;
}

json parameters_json(const JoelNetwork& net) {
  json layers = json::array();
  for (const auto& l : net.layers) layers.push_back(layer_to_json(l));
  return {{"model_version", net.version},
          {"lambda", net.lambda},
          {"thresholds",
           {{"concepts", net.concept_thresholds}, {"decision", net.decision_threshold}}},
          {"layers", std::move(layers)}};
}

constexpr const char* kMagic = "joel-checkpoint";

}  // namespace

std::string model_hash(const JoelNetwork& net) { return sha256_hex(parameters_json(net).dump()); }

json checkpoint_to_json(const Checkpoint& ckpt) {
  const JoelNetwork& net = ckpt.net;
  net.validate();
  json j = parameters_json(net);
  j["format"] = kMagic;
  j["format_version"] = kCheckpointFormatVersion;
  j["arch"] = net.arch.to_json();
  j["taxonomy"] = net.taxonomy.to_json();
  j["taxonomy_sha256"] = net.taxonomy.sha256();
  j["codec"] = ckpt.codec ? ckpt.codec->to_json() : json(nullptr);
  j["metadata"] = ckpt.metadata;
  return j;
}

Checkpoint checkpoint_from_json(const json& j, const ConceptTaxonomy* expected) {
  if (!j.is_object() || j.value("format", std::string{}) != kMagic) {
    throw FormatError("not a joel checkpoint");
  }
  const int version = j.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw FormatError("unsupported checkpoint format_version " + std::to_string(version));
  }
  Checkpoint ckpt;
  try {
    JoelNetwork& net = ckpt.net;
    net.taxonomy = ConceptTaxonomy::from_json(j.at("taxonomy"));
    const std::string recorded = j.at("taxonomy_sha256").get<std::string>();
    if (net.taxonomy.sha256() != recorded) {
      throw FormatError("checkpoint taxonomy does not match its recorded hash");
    }
    if (expected != nullptr && expected->sha256() != recorded) {
      throw ValidationError("taxonomy hash mismatch: checkpoint " + recorded + ", given " +
                            expected->sha256());
    }
    net.arch = Architecture::from_json(j.at("arch"));
    net.version = j.at("model_version").get<std::uint64_t>();
    net.lambda = j.at("lambda").get<double>();
    net.concept_thresholds = j.at("thresholds").at("concepts").get<std::vector<double>>();
    net.decision_threshold = j.at("thresholds").at("decision").get<double>();
    for (const json& l : j.at("layers")) net.layers.push_back(layer_from_json(l));
    net.validate();
    if (j.contains("codec") && !j.at("codec").is_null()) {
      ckpt.codec = FeatureCodec::from_json(j.at("codec"));
    }
    if (j.contains("metadata")) ckpt.metadata = j.at("metadata");
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, checkpoint_to_json(ckpt).dump());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ConceptTaxonomy* expected) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return checkpoint_from_json(j, expected);
}

}  // namespace joel
