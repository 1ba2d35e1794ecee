#include "joel/pipeline.hpp"

#include "joel/error.hpp"
#include "joel/io_util.hpp"

namespace joel {

using nlohmann::json;

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  if (j.contains("split")) {
    const json& s = j.at("split");
    SplitSpec spec;
    auto instant = [&](const char* key) {
      const json& v = s.at(key);
      return v.is_string() ? parse_timestamp(v.get<std::string>()) : v.get<Timestamp>();
    };
    spec.train_end = instant("train_end");
    spec.val_end = instant("val_end");
    spec.test_end = instant("test_end");
    spec.prod_end = instant("prod_end");
    c.split = spec;
  }
  if (j.contains("split_fractions")) {
    const auto f = j.at("split_fractions").get<std::vector<double>>();
    if (f.size() != 3) throw ValidationError("split_fractions needs three cumulative fractions");
    c.split_fractions = {f[0], f[1], f[2]};
  }
  c.undersample_keep_rate = j.value("undersample_keep_rate", c.undersample_keep_rate);
  c.seed = j.value("seed", c.seed);
  c.top_k = j.value("top_k", c.top_k);
  c.targets.decision_fpr = j.value("decision_fpr", c.targets.decision_fpr);
  c.targets.concept_fpr = j.value("concept_fpr", c.targets.concept_fpr);
  c.threads = j.value("threads", c.threads);
  c.grid = grid_from_json(j);
  return c;
}

PipelineResult run_pipeline(const RawTable& events, const RuleConceptMapping& mapping,
                            const ConceptTaxonomy& tax, const PipelineConfig& cfg) {
  AnnotationResult annotation = annotate_dataset(events.events, mapping, tax);
  std::vector<AnnotatedEvent> annotated = std::move(annotation.events);
  annotation.events.clear();
  PipelineResult out = run_pipeline(events.schema, std::move(annotated), tax, cfg);
  out.annotation = std::move(annotation);
  return out;
}

PipelineResult run_pipeline(const FeatureSchema& schema, std::vector<AnnotatedEvent> annotated,
                            const ConceptTaxonomy& tax, const PipelineConfig& cfg) {
  PipelineResult out;

  if (cfg.split) {
    out.split = *cfg.split;
    out.split.undersample_keep_rate = cfg.undersample_keep_rate;
    out.split.seed = cfg.seed;
  } else {
    std::vector<Timestamp> ts;
    ts.reserve(annotated.size());
    for (const auto& e : annotated) ts.push_back(e.timestamp);
    out.split = split_by_fraction(ts, cfg.split_fractions, cfg.undersample_keep_rate, cfg.seed);
  }
  Splits<AnnotatedEvent> splits = temporal_split<AnnotatedEvent>(annotated, out.split);
  out.dropped = splits.dropped;
  splits.train = undersample_negatives<AnnotatedEvent>(splits.train, out.split.undersample_keep_rate,
                                                       mix_seed(cfg.seed, 0x5A3));
  out.split_sizes = {splits.train.size(), splits.validation.size(), splits.test.size(),
                     splits.production.size()};
  if (splits.train.empty() || splits.validation.empty() || splits.test.empty()) {
    throw ValidationError("train, validation and test splits must all be non-empty");
  }

  out.codec = FeatureCodec::fit<AnnotatedEvent>(schema, splits.train, cfg.top_k);
  EncodedSplits data{encode_all(out.codec, splits.train), encode_all(out.codec, splits.validation),
                     encode_all(out.codec, splits.test), encode_all(out.codec, splits.production)};

  GridOptions opts;
  opts.targets = cfg.targets;
  opts.threads = cfg.threads;
  out.results = grid_search(cfg.grid, data, tax, opts);
  out.selection = selection_report(out.results);
  const GridResult& best = select_best(rank(out.results));
  out.selected.net = best.training->net;
  out.selected.codec = out.codec;
  out.selected.metadata = {{"grid_index", best.index},
                           {"grid_name", best.entry.name},
                           {"test", best.test.to_json(0)}};
  if (best.production) out.selected.metadata["production"] = best.production->to_json(0);
  return out;
}

void write_pipeline_outputs(const PipelineResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "metrics");
  result.codec.save(dir / "codec.json");
  for (const auto& r : result.results) {
    if (!r.ok) continue;
    Checkpoint ck{r.training->net, result.codec, {{"grid_index", r.index}}};
    save_checkpoint(ck, dir / (r.entry.name + ".ckpt.json"));
    json m{{"entry", r.entry.to_json()}, {"test", r.test.to_json()}};
    if (r.production) m["production"] = r.production->to_json();
    json hist = json::array();
    for (const auto& h : r.training->history) {
      hist.push_back({{"epoch", h.epoch},
                      {"train_total", h.train_loss.total},
                      {"train_decision", h.train_loss.decision},
                      {"train_semantic", h.train_loss.semantic},
                      {"validation", h.validation_loss},
                      {"improved", h.improved}});
    }
    m["history"] = hist;
    write_file_atomic(dir / "metrics" / (r.entry.name + ".json"), m.dump(2));
  }
  save_checkpoint(result.selected, dir / "selected.ckpt.json");
  json sel = result.selection;
  sel["split"] = {{"train_end", format_timestamp(result.split.train_end)},
                  {"val_end", format_timestamp(result.split.val_end)},
                  {"test_end", format_timestamp(result.split.test_end)},
                  {"prod_end", format_timestamp(result.split.prod_end)},
                  {"dropped", result.dropped},
                  {"sizes", result.split_sizes}};
  sel["selected_model_hash"] = model_hash(result.selected.net);
  write_file_atomic(dir / "selection.json", sel.dump(2));
}

}  // namespace joel
