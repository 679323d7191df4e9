#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sclip/experiment.hpp"

namespace {

using namespace sclip;

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level() {
  const char* env = std::getenv("SCLIP_LOG");
  if (!env) return LogLevel::info;
  const std::string v = env;
  if (v == "error") return LogLevel::error;
  if (v == "debug") return LogLevel::debug;
  return LogLevel::info;
}

void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::info) std::fprintf(stderr, "[sclip] %s\n", msg.c_str());
}

void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::debug) std::fprintf(stderr, "[sclip:debug] %s\n", msg.c_str());
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  nlohmann::json doc;
  if (!path.empty()) {
    try {
      doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::config_invalid, "config '" + path + "': " + e.what());
    }
  }
  for (const auto& assignment : sets) apply_override(doc, assignment);
  ExperimentConfig cfg = experiment_config_from_json(doc);
  cfg.validate();
  return cfg;
}

bool sniff_magic(const std::string& data, std::string_view magic) {
  return data.size() >= magic.size() && std::string_view(data).substr(0, magic.size()) == magic;
}

int cmd_generate_data(const std::string& config_path, const std::vector<std::string>& sets,
                      const std::string& out_path) {
  const ExperimentConfig cfg = load_config(config_path, sets);
  const World world = generate_world(cfg.world);
  const Dataset ds = build_dataset(world, cfg.data.n_labeled, cfg.data.n_unlabeled,
                                   cfg.data.n_eval);
  save_dataset(out_path, ds);
  std::printf("wrote %s: %zu paired, %zu unlabeled, %zu eval, %zu keywords\n",
              out_path.c_str(), ds.train_paired.size(), ds.train_unlabeled.size(),
              ds.eval_paired.size(), ds.keyword_names.size());
  return 0;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& data_path, bool summary) {
  ExperimentConfig cfg = load_config(config_path, sets);
  if (!data_path.empty()) cfg.dataset_path = data_path;
  const Dataset ds = dataset_for(cfg);
  log_info("dataset: " + std::to_string(ds.train_paired.size()) + " paired, " +
           std::to_string(ds.train_unlabeled.size()) + " unlabeled");

  const ExperimentResult result = run_experiment(cfg, ds);
  write_experiment_outputs(cfg, result, summary);
  for (const auto& run : result.runs) {
    for (const auto& record : run.records) {
      log_debug(metrics_line(record).dump());
    }
    const auto& rec = run.final_record();
    std::printf("%s: zero_shot_top1=%.2f", to_string(run.method).c_str(),
                rec.report.zero_shot_top1);
    for (const auto& entry : rec.report.retrieval) {
      std::printf(" r@%d_%s=%.2f", entry.k, entry.direction.c_str(), entry.recall);
    }
    std::printf("\n");
  }
  log_info("outputs in " + cfg.output_dir);
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_path,
             const std::vector<std::string>& sets) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(ckpt.config_echo);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse_error, std::string("checkpoint config echo: ") + e.what());
  }
  for (const auto& assignment : sets) apply_override(doc, assignment);
  ExperimentConfig cfg = experiment_config_from_json(doc);
  if (!data_path.empty()) cfg.dataset_path = data_path;
  const Dataset ds = dataset_for(cfg);
  const EvalReport report = evaluate_model(ckpt.params, ds, cfg.eval.retrieval_ks);

  nlohmann::json out{{"zero_shot_top1", report.zero_shot_top1},
                     {"n_queries", report.n_classification_queries}};
  for (const auto& entry : report.retrieval) {
    out["r_at_" + std::to_string(entry.k) + "_" + entry.direction] = entry.recall;
  }
  std::printf("%s\n", out.dump(2).c_str());
  return 0;
}

int cmd_grad_check(const std::string& config_path, const std::vector<std::string>& sets,
                   double epsilon, double tolerance) {
  const ExperimentConfig cfg = load_config(config_path, sets);
  const Dataset ds = dataset_for(cfg);

  TrainConfig tcfg = cfg.train;
  Rng init_rng(tcfg.seed);
  EncoderParams params =
      EncoderParams::init(ds.train_paired.front().raw_image.size(),
                          ds.train_paired.front().raw_text.size(), tcfg, init_rng);
  BatchSampler sampler(detail::to_paired_examples(ds.train_paired),
                       detail::stack_images(ds.train_unlabeled), tcfg.seed + 0x5eed);
  const Batch batch =
      sampler.next(tcfg.n_paired_per_batch,
                   tcfg.method == Method::supervised ? 0 : tcfg.m_unpaired_per_batch);
  KeywordContext keywords{ds.keyword_raw, ds.keyword_names, std::nullopt};
  if (tcfg.keyword_source == KeywordSource::fixed) {
    keywords.fixed = encode(params, keywords.raw, TowerKind::text);
  }

  const double err = grad_check(params, batch, keywords, tcfg, epsilon);
  std::printf("method=%s max_rel_err=%.3e epsilon=%.1e\n", to_string(tcfg.method).c_str(),
              err, epsilon);
  if (err > tolerance) {
    std::fprintf(stderr, "gradient check failed: %.3e > %.3e\n", err, tolerance);
    return 3;
  }
  return 0;
}

int cmd_sinkhorn(const std::string& cost_path, double lambda, int iterations,
                 const std::string& out_path) {
  const std::string data = read_file(cost_path);
  const bool binary = sniff_magic(data, kMatrixMagic);
  const Matrix cost_values = binary ? decode_matrix_scmx(data) : parse_csv_matrix(data);
  const auto cost = CostMatrix::from_values(cost_values);
  const auto plan = solve(cost, ProbabilityVector::uniform(cost.m()),
                          ProbabilityVector::uniform(cost.n()), lambda, iterations);
  const auto [row_res, col_res] = marginal_residual(plan);
  std::printf("plan %zux%zu iterations=%d row_residual=%.3e col_residual=%.3e\n",
              plan.values.rows(), plan.values.cols(), iterations, row_res, col_res);
  if (!out_path.empty()) {
    atomic_write_file(out_path, binary ? encode_matrix_scmx(plan.values)
                                       : format_csv_matrix(plan.values));
    log_info("plan written to " + out_path);
  }
  return 0;
}

int cmd_import_embeddings(const std::string& in_path, const std::string& out_path) {
  const std::string data = read_file(in_path);
  Matrix raw;
  if (sniff_magic(data, kEmbeddingMagic)) {
    raw = decode_embeddings_sclb(data);
  } else if (sniff_magic(data, "SC")) {
    throw Error(Errc::bad_magic, "'" + in_path + "' is not an SCLB1 embedding file");
  } else {
    raw = parse_csv_matrix(data);
  }
  // tolerate upstream drift: re-normalize rows on load
  const EmbeddingMatrix normalized = normalize_rows(raw);
  std::printf("imported %zu embeddings of dim %zu\n", normalized.rows(), normalized.dim());
  if (!out_path.empty()) {
    atomic_write_file(out_path, encode_embeddings_sclb(normalized.values()));
    log_info("normalized embeddings written to " + out_path);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"S-CLIP: semi-supervised contrastive training on synthetic two-modality data"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_path;
  std::string data_path;
  std::string checkpoint_path;
  std::vector<std::string> sets;
  bool summary = false;
  double lambda = 0.07;
  int iterations = kDefaultSinkhornIterations;
  double epsilon = 1e-5;
  double tolerance = 1e-4;

  auto* gen = app.add_subcommand("generate-data", "generate a synthetic dataset (SCDS1)");
  gen->add_option("--config", config_path, "experiment config JSON");
  gen->add_option("--set", sets, "dotted-path override, e.g. --set world.seed=7");
  gen->add_option("--out", out_path, "output dataset path")->required();

  auto* train = app.add_subcommand("train", "train methods and write metrics.jsonl");
  train->add_option("--config", config_path, "experiment config JSON");
  train->add_option("--set", sets, "dotted-path override, e.g. --set train.tau=0.05");
  train->add_option("--data", data_path, "pre-generated dataset path");
  train->add_flag("--summary", summary, "also write summary.csv");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "SCKP1 checkpoint")->required();
  eval_cmd->add_option("--data", data_path, "dataset path (defaults to the config echo)");
  eval_cmd->add_option("--set", sets, "dotted-path override applied to the config echo");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of analytic gradients");
  gc->add_option("--config", config_path, "experiment config JSON");
  gc->add_option("--set", sets, "dotted-path override");
  gc->add_option("--epsilon", epsilon, "finite-difference step");
  gc->add_option("--tol", tolerance, "max relative error accepted");

  auto* sink = app.add_subcommand("sinkhorn", "solve entropic OT for a cost matrix file");
  sink->add_option("--cost", config_path, "cost matrix (CSV or SCMX1)")->required();
  sink->add_option("--lambda", lambda, "entropic regularizer scale");
  sink->add_option("--iterations", iterations, "full Sinkhorn rounds");
  sink->add_option("--out", out_path, "plan output path (format follows the input)");

  auto* imp = app.add_subcommand("import-embeddings", "load, validate and normalize embeddings");
  imp->add_option("--in", data_path, "embeddings file (SCLB1 or CSV)")->required();
  imp->add_option("--out", out_path, "write normalized embeddings (SCLB1)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate_data(config_path, sets, out_path);
    if (train->parsed()) return cmd_train(config_path, sets, data_path, summary);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint_path, data_path, sets);
    if (gc->parsed()) return cmd_grad_check(config_path, sets, epsilon, tolerance);
    if (sink->parsed()) return cmd_sinkhorn(config_path, lambda, iterations, out_path);
    if (imp->parsed()) return cmd_import_embeddings(data_path, out_path);
  } catch (const sclip::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return sclip::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
