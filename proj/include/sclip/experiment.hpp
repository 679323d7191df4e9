#pragma once

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sclip/error.hpp"
#include "sclip/eval.hpp"
#include "sclip/synthdata.hpp"
#include "sclip/trainer.hpp"

namespace sclip {

struct DataConfig {
  int n_labeled = 40;
  int n_unlabeled = 360;
  int n_eval = 512;

  void validate() const {
    if (n_labeled < 2) throw Error(Errc::config_invalid, "data.n_labeled must be >= 2");
    if (n_unlabeled < 0) throw Error(Errc::config_invalid, "data.n_unlabeled must be >= 0");
    if (n_eval < 1) throw Error(Errc::config_invalid, "data.n_eval must be >= 1");
  }
};

struct EvalConfig {
  int eval_every_epochs = 5;
  std::vector<int> retrieval_ks = {1, 5};

  void validate() const {
    if (eval_every_epochs < 1) {
      throw Error(Errc::config_invalid, "eval.eval_every_epochs must be >= 1");
    }
    if (retrieval_ks.empty()) {
      throw Error(Errc::config_invalid, "eval.retrieval_ks must not be empty");
    }
    for (int k : retrieval_ks) {
      if (k < 1) throw Error(Errc::config_invalid, "eval.retrieval_ks entries must be >= 1");
    }
  }
};

struct ExperimentConfig {
  WorldSpec world;
  DataConfig data;
  TrainConfig train;
  EvalConfig eval;
  std::string output_dir = "out";
  std::vector<Method> methods_to_compare;  // empty -> just train.method
  std::string dataset_path;                // optional pre-generated dataset

  std::vector<Method> methods() const {
    return methods_to_compare.empty() ? std::vector<Method>{train.method} : methods_to_compare;
  }

  void validate() const {
    world.validate();
    data.validate();
    train.validate();
    eval.validate();
    if (output_dir.empty()) throw Error(Errc::config_invalid, "output_dir must not be empty");
    if (data.n_labeled < train.n_paired_per_batch) {
      throw Error(Errc::config_invalid,
                  "data.n_labeled must be >= train.n_paired_per_batch");
    }
    if (train.method != Method::supervised && data.n_unlabeled < train.m_unpaired_per_batch) {
      throw Error(Errc::config_invalid,
                  "data.n_unlabeled must be >= train.m_unpaired_per_batch");
    }
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& t) {
  return nlohmann::json{{"method", to_string(t.method)},
                        {"n_paired_per_batch", t.n_paired_per_batch},
                        {"m_unpaired_per_batch", t.m_unpaired_per_batch},
                        {"tau", t.tau},
                        {"lambda", t.lambda},
                        {"sinkhorn_iterations", t.sinkhorn_iterations},
                        {"epochs", t.epochs},
                        {"learning_rate", t.learning_rate},
                        {"warmup_steps", t.warmup_steps},
                        {"schedule", to_string(t.schedule)},
                        {"freeze", to_string(t.freeze)},
                        {"keyword_source", to_string(t.keyword_source)},
                        {"seed", t.seed},
                        {"momentum", t.momentum},
                        {"embed_dim", t.embed_dim},
                        {"hidden_dim", t.hidden_dim},
                        {"learnable_tau", t.learnable_tau},
                        {"use_caption_loss", t.use_caption_loss},
                        {"use_keyword_loss", t.use_keyword_loss},
                        {"pseudo_source", to_string(t.pseudo_source)},
                        {"keyword_loss_mode", to_string(t.keyword_loss_mode)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig t;
  try {
    if (j.contains("method")) t.method = parse_method(j.at("method").get<std::string>());
    t.n_paired_per_batch = j.value("n_paired_per_batch", t.n_paired_per_batch);
    t.m_unpaired_per_batch = j.value("m_unpaired_per_batch", t.m_unpaired_per_batch);
    t.tau = j.value("tau", t.tau);
    t.lambda = j.value("lambda", t.tau);  // lambda follows tau unless given
    t.sinkhorn_iterations = j.value("sinkhorn_iterations", t.sinkhorn_iterations);
    t.epochs = j.value("epochs", t.epochs);
    t.learning_rate = j.value("learning_rate", t.learning_rate);
    t.warmup_steps = j.value("warmup_steps", t.warmup_steps);
    if (j.contains("schedule")) t.schedule = parse_schedule(j.at("schedule").get<std::string>());
    if (j.contains("freeze")) t.freeze = parse_freeze(j.at("freeze").get<std::string>());
    if (j.contains("keyword_source")) {
      t.keyword_source = parse_keyword_source(j.at("keyword_source").get<std::string>());
    } else if (j.contains("keyword_source_embeddings")) {
      t.keyword_source =
          parse_keyword_source(j.at("keyword_source_embeddings").get<std::string>());
    }
    t.seed = j.value("seed", t.seed);
    t.momentum = j.value("momentum", t.momentum);
    t.embed_dim = j.value("embed_dim", t.embed_dim);
    t.hidden_dim = j.value("hidden_dim", t.hidden_dim);
    t.learnable_tau = j.value("learnable_tau", t.learnable_tau);
    t.use_caption_loss = j.value("use_caption_loss", t.use_caption_loss);
    t.use_keyword_loss = j.value("use_keyword_loss", t.use_keyword_loss);
    if (j.contains("pseudo_source")) {
      t.pseudo_source = parse_pseudo_source(j.at("pseudo_source").get<std::string>());
    }
    if (j.contains("keyword_loss_mode")) {
      t.keyword_loss_mode =
          parse_keyword_loss_mode(j.at("keyword_loss_mode").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_invalid, std::string("train config: ") + e.what());
  }
  return t;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : c.methods_to_compare) methods.push_back(to_string(m));
  return nlohmann::json{{"world", world_spec_to_json(c.world)},
                        {"data",
                         {{"n_labeled", c.data.n_labeled},
                          {"n_unlabeled", c.data.n_unlabeled},
                          {"n_eval", c.data.n_eval}}},
                        {"train", train_config_to_json(c.train)},
                        {"eval",
                         {{"eval_every_epochs", c.eval.eval_every_epochs},
                          {"retrieval_ks", c.eval.retrieval_ks}}},
                        {"output_dir", c.output_dir},
                        {"methods_to_compare", methods},
                        {"dataset_path", c.dataset_path}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("world")) c.world = world_spec_from_json(j.at("world"));
    if (j.contains("data")) {
      const auto& d = j.at("data");
      c.data.n_labeled = d.value("n_labeled", c.data.n_labeled);
      c.data.n_unlabeled = d.value("n_unlabeled", c.data.n_unlabeled);
      c.data.n_eval = d.value("n_eval", c.data.n_eval);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      c.eval.eval_every_epochs = e.value("eval_every_epochs", c.eval.eval_every_epochs);
      if (e.contains("retrieval_ks")) {
        c.eval.retrieval_ks = e.at("retrieval_ks").get<std::vector<int>>();
      }
    }
    c.output_dir = j.value("output_dir", c.output_dir);
    if (j.contains("methods_to_compare")) {
      c.methods_to_compare.clear();
      for (const auto& name : j.at("methods_to_compare")) {
        c.methods_to_compare.push_back(parse_method(name.get<std::string>()));
      }
    }
    c.dataset_path = j.value("dataset_path", c.dataset_path);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::config_invalid, std::string("experiment config: ") + e.what());
  }
  return c;
}

/// Apply dotted-path overrides like "train.tau=0.05" onto a JSON document.
/// Values parse as JSON when possible and fall back to strings.
inline void apply_override(nlohmann::json& doc, std::string_view assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw Error(Errc::config_invalid,
                "override '" + std::string(assignment) + "' must look like key.path=value");
  }
  std::string_view path = assignment.substr(0, eq);
  const std::string value(assignment.substr(eq + 1));
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key(path.substr(start, dot - start));
    if (key.empty()) {
      throw Error(Errc::config_invalid, "override path has an empty segment");
    }
    if (dot == std::string_view::npos) {
      auto parsed = nlohmann::json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

// ---- run loop ----

struct EpochRecord {
  Method method = Method::supervised;
  int epoch = 0;
  std::int64_t step = 0;
  StepMetrics losses;
  EvalReport report;
};

struct MethodRun {
  Method method = Method::supervised;
  EncoderParams params;
  OptimizerState opt;
  std::vector<EpochRecord> records;

  const EpochRecord& final_record() const { return records.back(); }
};

namespace detail {

inline std::vector<PairedExample> to_paired_examples(const std::vector<SynthSample>& samples) {
  std::vector<PairedExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    PairedExample ex;
    ex.raw_image = s.raw_image;
    ex.captions.push_back({s.raw_text, s.keyword_indices});
    for (const auto& [text, kws] : s.extra_captions) ex.captions.push_back({text, kws});
    out.push_back(std::move(ex));
  }
  return out;
}

inline Matrix stack_images(const std::vector<SynthSample>& samples) {
  if (samples.empty()) return Matrix(0, 0);
  Matrix out(samples.size(), samples.front().raw_image.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = samples[i].raw_image[j];
  }
  return out;
}

inline Matrix stack_texts(const std::vector<SynthSample>& samples) {
  Matrix out(samples.size(), samples.front().raw_text.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = samples[i].raw_text[j];
  }
  return out;
}

}  // namespace detail

/// Evaluate the current encoders on the held-out pairs and class prompts.
inline EvalReport evaluate_model(const EncoderParams& params, const Dataset& ds,
                                 const std::vector<int>& retrieval_ks) {
  const auto eval_images = encode(params, detail::stack_images(ds.eval_paired), TowerKind::image);
  const auto eval_texts = encode(params, detail::stack_texts(ds.eval_paired), TowerKind::text);
  const auto class_embs = encode(params, ds.class_prompt_raw(), TowerKind::text);
  std::vector<std::size_t> labels(ds.eval_paired.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = ds.eval_paired[i].class_index;
  return evaluate_embeddings(eval_images, eval_texts, class_embs, labels, retrieval_ks);
}

/// Train one method on the dataset: seeded init, per-epoch batches, losses,
/// and an evaluation record every eval_every_epochs (and at the last epoch).
inline MethodRun run_method(Method method, const ExperimentConfig& cfg, const Dataset& ds) {
  TrainConfig tcfg = cfg.train;
  tcfg.method = method;
  tcfg.validate();

  const std::size_t d_img_raw = ds.train_paired.front().raw_image.size();
  const std::size_t d_txt_raw = ds.train_paired.front().raw_text.size();

  Rng init_rng(tcfg.seed);
  MethodRun run;
  run.method = method;
  run.params = EncoderParams::init(d_img_raw, d_txt_raw, tcfg, init_rng);
  run.opt = OptimizerState::init(run.params);

  BatchSampler sampler(detail::to_paired_examples(ds.train_paired),
                       detail::stack_images(ds.train_unlabeled), tcfg.seed + 0x5eed);
  const std::int64_t steps_per_epoch = sampler.steps_per_epoch(tcfg.n_paired_per_batch);
  tcfg.total_steps = steps_per_epoch * tcfg.epochs;

  KeywordContext keywords;
  keywords.raw = ds.keyword_raw;
  keywords.names = ds.keyword_names;

  const int m_per_batch = method == Method::supervised ? 0 : tcfg.m_unpaired_per_batch;

  StepMetrics last;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    if (tcfg.keyword_source == KeywordSource::fixed) {
      keywords.fixed = encode(run.params, keywords.raw, TowerKind::text);
    }
    for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
      const Batch batch = sampler.next(tcfg.n_paired_per_batch, m_per_batch);
      last = train_step(run.params, run.opt, batch, keywords, tcfg);
    }
    const bool last_epoch = epoch + 1 == tcfg.epochs;
    if ((epoch + 1) % cfg.eval.eval_every_epochs == 0 || last_epoch) {
      EpochRecord record;
      record.method = method;
      record.epoch = epoch + 1;
      record.step = run.opt.step;
      record.losses = last;
      record.report = evaluate_model(run.params, ds, cfg.eval.retrieval_ks);
      run.records.push_back(std::move(record));
    }
  }
  return run;
}

inline nlohmann::json metrics_line(const EpochRecord& r) {
  nlohmann::json line{{"v", 1},
                      {"method", to_string(r.method)},
                      {"epoch", r.epoch},
                      {"step", r.step},
                      {"loss_total", r.losses.loss_total},
                      {"loss_clip", r.losses.loss_clip},
                      {"loss_caption", r.losses.loss_caption},
                      {"loss_keyword", r.losses.loss_keyword},
                      {"zero_shot_top1", r.report.zero_shot_top1}};
  for (const auto& entry : r.report.retrieval) {
    line["r_at_" + std::to_string(entry.k) + "_" + entry.direction] = entry.recall;
  }
  return line;
}

struct ExperimentResult {
  std::vector<MethodRun> runs;
};

/// Load or generate the dataset named by the config.
inline Dataset dataset_for(const ExperimentConfig& cfg) {
  if (!cfg.dataset_path.empty()) return load_dataset(cfg.dataset_path);
  const World world = generate_world(cfg.world);
  return build_dataset(world, cfg.data.n_labeled, cfg.data.n_unlabeled, cfg.data.n_eval);
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const Dataset& ds) {
  cfg.validate();
  ExperimentResult result;
  for (Method m : cfg.methods()) result.runs.push_back(run_method(m, cfg, ds));
  return result;
}

inline std::string format_metrics_jsonl(const ExperimentResult& result) {
  std::string out;
  for (const auto& run : result.runs) {
    for (const auto& record : run.records) {
      out += metrics_line(record).dump();
      out += '\n';
    }
  }
  return out;
}

/// Final-epoch comparison table, one row per method.
inline std::string format_summary_csv(const ExperimentResult& result) {
  std::ostringstream out;
  out.precision(17);
  out << "method,zero_shot_top1";
  if (!result.runs.empty()) {
    for (const auto& entry : result.runs.front().final_record().report.retrieval) {
      out << ",r_at_" << entry.k << "_" << entry.direction;
    }
  }
  out << '\n';
  for (const auto& run : result.runs) {
    const auto& rec = run.final_record();
    out << to_string(run.method) << ',' << rec.report.zero_shot_top1;
    for (const auto& entry : rec.report.retrieval) out << ',' << entry.recall;
    out << '\n';
  }
  return std::move(out).str();
}

/// metrics.jsonl + one checkpoint per method, all written atomically.
inline void write_experiment_outputs(const ExperimentConfig& cfg,
                                     const ExperimentResult& result, bool summary_csv) {
  std::filesystem::create_directories(cfg.output_dir);
  const auto dir = std::filesystem::path(cfg.output_dir);
  atomic_write_file((dir / "metrics.jsonl").string(), format_metrics_jsonl(result));
  if (summary_csv) {
    atomic_write_file((dir / "summary.csv").string(), format_summary_csv(result));
  }
  for (const auto& run : result.runs) {
    nlohmann::json echo = experiment_config_to_json(cfg);
    echo["train"]["method"] = to_string(run.method);
    save_checkpoint((dir / ("checkpoint_" + to_string(run.method) + ".sckp")).string(),
                    run.params, run.opt, echo.dump());
  }
}

}  // namespace sclip
