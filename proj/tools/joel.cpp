#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "joel/annotate.hpp"
#include "joel/dataset.hpp"
#include "joel/error.hpp"
#include "joel/gradcheck.hpp"
#include "joel/human_loop.hpp"
#include "joel/io_util.hpp"
#include "joel/kernels.hpp"
#include "joel/model.hpp"
#include "joel/pipeline.hpp"
#include "joel/review_service.hpp"
#include "joel/synth.hpp"
#include "joel/taxonomy.hpp"
#include "joel/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace joel;

namespace {

constexpr int kExitValidation = 2;

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2));
}

int cmd_annotate(const fs::path& in, const fs::path& mapping_path, const fs::path& tax_path,
                 const fs::path& out) {
  const ConceptTaxonomy tax = load_taxonomy(tax_path);
  const RuleConceptMapping mapping = load_mapping(mapping_path, tax);
  const RawTable raw = read_events(in);
  const AnnotationResult res = annotate_dataset(raw.events, mapping, tax);
  write_annotated(out, raw.schema, res.events, tax);
  std::cerr << "annotated " << res.events.size() << " events, " << res.fallback_rows
            << " fallback, " << raw.duplicates_removed << " duplicate ids dropped\n";
  std::cerr << "unknown rules: " << res.unknown_rule_total() << " occurrences of "
            << res.unknown_rules.size() << " ids\n";
  for (const auto& [rule, n] : res.unknown_rules) std::cerr << "  " << rule << '\t' << n << '\n';
  return 0;
}

int cmd_synth(const std::optional<fs::path>& config, std::uint64_t seed, std::size_t n,
              const fs::path& out_dir) {
  const SynthConfig cfg = config ? SynthConfig::from_json(json::parse(read_file(*config)))
                                 : SynthConfig::standard(n);
  const SynthData data = generate_synthetic(cfg, seed);
  write_synthetic(data, out_dir);
  std::size_t fraud = 0;
  for (const auto& e : data.events) fraud += e.fraud_label;
  std::cerr << "wrote " << data.events.size() << " events (" << fraud << " fraud) to "
            << out_dir << '\n';
  return 0;
}

int cmd_train(const fs::path& data_dir, const fs::path& grid_path, const fs::path& tax_path,
              const fs::path& out) {
  const ConceptTaxonomy tax = load_taxonomy(tax_path);
  const PipelineConfig cfg = PipelineConfig::from_json(json::parse(read_file(grid_path)));
  PipelineResult result;
  if (fs::exists(data_dir / "annotated.csv")) {
    AnnotatedTable table = read_annotated(data_dir / "annotated.csv", tax);
    result = run_pipeline(table.schema, std::move(table.events), tax, cfg);
  } else {
    const RawTable raw = read_events(data_dir / "events.csv");
    const RuleConceptMapping mapping = load_mapping(data_dir / "mapping.json", tax);
    result = run_pipeline(raw, mapping, tax, cfg);
    std::cerr << "unknown rule occurrences: " << result.annotation.unknown_rule_total() << '\n';
  }
  write_pipeline_outputs(result, out);
  for (const auto& r : result.results) {
    if (r.ok) {
      std::cerr << r.entry.name << ": recall@fpr " << r.fraud_recall() << ", mean concept AUC "
                << r.test.mean_auc << ", best epoch " << r.training->best_epoch << '\n';
    } else {
      std::cerr << r.entry.name << ": failed: " << r.error << '\n';
    }
  }
  std::cerr << "selected " << result.selection.at("selected_name").get<std::string>() << '\n';
  return 0;
}

int cmd_evaluate(const fs::path& model, const fs::path& data, double fpr, double concept_fpr,
                 const std::optional<fs::path>& codec_path, const fs::path& report) {
  const Checkpoint ck = load_checkpoint(model);
  FeatureCodec codec;
  if (codec_path) {
    codec = FeatureCodec::load(*codec_path);
  } else if (ck.codec) {
    codec = *ck.codec;
  } else {
    throw ValidationError("checkpoint has no codec; pass --codec");
  }
  AnnotatedTable table = read_annotated(data, ck.net.taxonomy);
  conform(table, codec.schema());
  const EncodedSet set = encode_all(codec, table.events);
  const MetricsReport m = evaluate(ck.net, set, EvalTargets{fpr, concept_fpr});
  json j = m.to_json();
  j["model_version"] = ck.net.version;
  j["model_hash"] = model_hash(ck.net);
  j["events"] = set.size();
  write_json(report, j);
  std::cerr << "recall@" << fpr << " FPR " << m.decision.recall_at_fpr << ", decision AUC "
            << m.decision.auc << ", mean concept AUC " << m.mean_auc << '\n';
  return 0;
}

struct SimulateArgs {
  fs::path model;
  fs::path truth;
  double noise = 0.1;
  std::size_t batch = 100;
  double lr = 0.05;
  std::uint64_t seed = 0;
  fs::path report;
  std::size_t stream = 1500;
  std::size_t offset = 0;
  std::size_t experts = 1;
  std::size_t epochs_per_tune = TuneConfig{}.epochs_per_tune;
  double min_accuracy = 0.0;
  std::optional<fs::path> feedback;
};

int cmd_simulate(const SimulateArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  if (!ck.codec) throw ValidationError("checkpoint has no codec");
  const FeatureCodec& codec = *ck.codec;
  AnnotatedTable table = read_annotated(a.truth, ck.net.taxonomy);
  conform(table, codec.schema());
  if (a.offset + a.stream >= table.events.size()) {
    throw ValidationError("truth file too short for offset + stream plus a held-out set");
  }
  const auto first = table.events.begin() + static_cast<std::ptrdiff_t>(a.offset);
  const std::vector<AnnotatedEvent> stream(first, first + static_cast<std::ptrdiff_t>(a.stream));
  const std::vector<AnnotatedEvent> held_out(first + static_cast<std::ptrdiff_t>(a.stream),
                                             table.events.end());
  const EncodedSet held = encode_all(codec, held_out);

  std::vector<LoopParticipant> participants;
  for (std::size_t i = 0; i < a.experts; ++i) {
    SimulatedExpert probe(a.noise, mix_seed(a.seed, 1000 + i));
    ExpertProfile p;
    p.expert_id = "sim" + std::to_string(i);
    p.accuracy_estimate = estimate_accuracy(probe, held_out, ck.net.taxonomy);
    p.qualified = expert_gate(p, a.min_accuracy);
    participants.push_back({p, SimulatedExpert(a.noise, mix_seed(a.seed, i))});
  }

  TuneConfig tc;
  tc.batch_size = a.batch;
  tc.learning_rate = a.lr;
  tc.seed = a.seed;
  tc.epochs_per_tune = a.epochs_per_tune;
  std::optional<FeedbackStore> file_store;
  FeedbackStore memory_store;
  if (a.feedback) file_store.emplace(*a.feedback);
  FeedbackStore& store = file_store ? *file_store : memory_store;

  const MetricsReport before = evaluate(ck.net, held);
  const LoopResult loop = human_teaching_loop(ck.net, stream, codec, participants, tc, store,
                                              stream.front().timestamp);
  const MetricsReport after = evaluate(loop.net, held);

  json experts = json::array();
  for (const auto& p : participants) {
    experts.push_back({{"expert_id", p.profile.expert_id},
                       {"accuracy_estimate", *p.profile.accuracy_estimate},
                       {"qualified", p.profile.qualified}});
  }
  json j{{"before", before.to_json()},
         {"after", after.to_json()},
         {"tunes", loop.tunes},
         {"model_version_before", ck.net.version},
         {"model_version_after", loop.net.version},
         {"model_hash_after", model_hash(loop.net)},
         {"stream_events", stream.size()},
         {"held_out_events", held.size()},
         {"noise", a.noise},
         {"tune", tc.to_json()},
         {"experts", experts},
         {"log", loop_log_json(loop.log)}};
  write_json(a.report, j);
  std::cerr << "tunes " << loop.tunes << ", mean concept AUC " << before.mean_auc << " -> "
            << after.mean_auc << ", recall@FPR " << before.decision.recall_at_fpr << " -> "
            << after.decision.recall_at_fpr << '\n';
  return 0;
}

struct ServeArgs {
  fs::path model;
  fs::path codec;
  fs::path taxonomy;
  fs::path events;
  fs::path feedback;
  int port = 8080;
  std::string host = "127.0.0.1";
  std::size_t batch = 100;
  double tune_lr = 0.05;
  std::optional<fs::path> experts;
  double min_accuracy = 0.0;
};

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const ServeArgs& a) {
  const ConceptTaxonomy tax = load_taxonomy(a.taxonomy);
  Checkpoint ck = load_checkpoint(a.model, &tax);
  const FeatureCodec codec = FeatureCodec::load(a.codec);

  ServiceConfig cfg;
  cfg.tune.batch_size = a.batch;
  cfg.tune.learning_rate = a.tune_lr;
  if (const char* t = std::getenv("JOEL_ADMIN_TOKEN")) cfg.admin_token = t;
  if (const char* ttl = std::getenv("JOEL_CLAIM_TTL_SECS")) cfg.claim_ttl_secs = std::stoll(ttl);
  ExpertRegistry experts;
  if (a.experts) {
    experts = ExpertRegistry::load(*a.experts, a.min_accuracy);
  } else {
    cfg.open_registration = true;
  }

  FeedbackStore store(a.feedback);
  ReviewService service(cfg, tax, codec, store, std::move(experts));
  service.load_model(std::move(ck.net), ck.metadata);
  RawTable stream = read_events(a.events);
  conform(stream, codec.schema());
  const std::size_t queued = service.enqueue(stream.events);
  std::cerr << "queued " << queued << " of " << stream.events.size() << " events; "
            << store.size() << " feedback records replayed\n";

  httplib::Server server;
  bind_routes(server, service);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on " << a.host << ':' << a.port << '\n';
  if (!server.listen(a.host, a.port)) {
    std::cerr << "could not bind " << a.host << ':' << a.port << '\n';
    return 1;
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t count) {
  const GradcheckReport r = run_gradcheck(seed, count);
  for (const auto& c : r.cases) {
    std::cout << "params " << c.parameters << " lambda " << c.lambda << " bn " << c.batch_norm
              << " max_rel_err " << c.max_relative_error << '\n';
  }
  const bool ok = r.worst <= 1e-4;
  std::cout << (ok ? "OK" : "FAIL") << " worst relative error " << r.worst << '\n';
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint explainable fraud model: training, evaluation and the human review loop"};
  app.require_subcommand(1);
  std::string kernels;
  app.add_option("--kernels", kernels, "Force kernel set (scalar, avx2)");

  fs::path in, mapping, tax, out, config, data_dir, grid, model, data, report, truth, codec_path;
  std::uint64_t seed = 0;
  std::size_t n_events = 10000, count = 20;
  double fpr = 0.03, concept_fpr = 0.20;
  SimulateArgs sim;
  ServeArgs serve;

  auto* annotate = app.add_subcommand("annotate", "Attach concepts to events via the rule mapping");
  annotate->add_option("--in", in)->required();
  annotate->add_option("--mapping", mapping)->required();
  annotate->add_option("--taxonomy", tax)->required();
  annotate->add_option("--out", out)->required();

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset with planted concepts");
  auto* synth_config = synth->add_option("--config", config);
  synth->add_option("--seed", seed);
  synth->add_option("--events", n_events, "Event count for the built-in config");
  synth->add_option("--out-dir", out)->required();

  auto* train = app.add_subcommand("train", "Bootstrap grid search and model selection");
  train->add_option("--data-dir", data_dir)->required();
  train->add_option("--grid", grid)->required();
  train->add_option("--taxonomy", tax)->required();
  train->add_option("--out", out)->required();

  auto* eval = app.add_subcommand("evaluate", "Score an annotated dataset");
  eval->add_option("--model", model)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--fpr", fpr);
  eval->add_option("--concept-fpr", concept_fpr);
  auto* eval_codec = eval->add_option("--codec", codec_path, "Defaults to the checkpoint's codec");
  eval->add_option("--report", report)->required();

  auto* simulate = app.add_subcommand("simulate", "Run the teaching loop with simulated experts");
  simulate->add_option("--model", sim.model)->required();
  simulate->add_option("--truth", sim.truth)->required();
  simulate->add_option("--noise", sim.noise);
  simulate->add_option("--batch", sim.batch);
  simulate->add_option("--lr", sim.lr);
  simulate->add_option("--seed", sim.seed);
  simulate->add_option("--report", sim.report)->required();
  simulate->add_option("--stream", sim.stream, "Events fed to the loop");
  simulate->add_option("--offset", sim.offset, "First truth row of the stream");
  simulate->add_option("--experts", sim.experts, "Number of simulated experts");
  simulate->add_option("--epochs-per-tune", sim.epochs_per_tune);
  simulate->add_option("--min-accuracy", sim.min_accuracy);
  auto* sim_feedback = simulate->add_option("--feedback", "Persist feedback to this JSONL file");

  auto* srv = app.add_subcommand("serve", "HTTP review service");
  srv->add_option("--model", serve.model)->required();
  srv->add_option("--codec", serve.codec)->required();
  srv->add_option("--taxonomy", serve.taxonomy)->required();
  srv->add_option("--events", serve.events)->required();
  srv->add_option("--feedback", serve.feedback)->required();
  srv->add_option("--port", serve.port);
  srv->add_option("--host", serve.host);
  srv->add_option("--batch", serve.batch);
  srv->add_option("--tune-lr", serve.tune_lr);
  auto* srv_experts = srv->add_option("--experts", "Expert registry JSON");
  srv->add_option("--min-accuracy", serve.min_accuracy);

  auto* gc = app.add_subcommand("gradcheck", "Check backpropagation against finite differences");
  gc->add_option("--seed", seed);
  gc->add_option("--count", count);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit 0; malformed command lines count as validation errors
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (!kernels.empty()) {
      const kernels::Isa isa = kernels == "avx2" ? kernels::Isa::avx2 : kernels::Isa::scalar;
      if (!kernels::select(isa)) throw ValidationError("kernel set unavailable: " + kernels);
    }
    if (*annotate) return cmd_annotate(in, mapping, tax, out);
    if (*synth) {
      return cmd_synth(*synth_config ? std::optional<fs::path>(config) : std::nullopt, seed,
                       n_events, out);
    }
    if (*train) return cmd_train(data_dir, grid, tax, out);
    if (*eval) {
      return cmd_evaluate(model, data, fpr, concept_fpr,
                          *eval_codec ? std::optional<fs::path>(codec_path) : std::nullopt, report);
    }
    if (*simulate) {
      if (*sim_feedback) sim.feedback = sim_feedback->as<std::string>();
      return cmd_simulate(sim);
    }
    if (*srv) {
      if (*srv_experts) serve.experts = srv_experts->as<std::string>();
      return cmd_serve(serve);
    }
    if (*gc) return cmd_gradcheck(seed, count);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
