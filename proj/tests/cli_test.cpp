// Drives the installed CLI binary end to end. The binary path arrives via
// the SCLIP_BIN environment variable (set by ctest).
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sclip/io.hpp"

namespace fs = std::filesystem;

namespace {

int failures = 0;

void check(bool ok, const std::string& what) {
  std::printf("%s %s\n", ok ? "ok  " : "FAIL", what.c_str());
  if (!ok) ++failures;
}

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

RunResult run(const std::string& bin, const std::string& args, const fs::path& dir) {
  const fs::path out_file = dir / "cmd_output.txt";
  const std::string cmd = bin + " " + args + " > " + out_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult result;
  result.exit_code = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out_file);
  std::ostringstream ss;
  ss << in.rdbuf();
  result.output = std::move(ss).str();
  return result;
}

}  // namespace

int main() {
  const char* bin_env = std::getenv("SCLIP_BIN");
  if (!bin_env) {
    std::fprintf(stderr, "SCLIP_BIN not set\n");
    return 1;
  }
  const std::string bin = bin_env;
  const fs::path dir = fs::temp_directory_path() / "sclip_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  {
    auto r = run(bin, "--help", dir);
    check(r.exit_code == 0, "--help exits 0");
    check(r.output.find("generate-data") != std::string::npos, "--help lists subcommands");
  }

  const fs::path cfg_path = dir / "config.json";
  {
    nlohmann::json cfg{
        {"world", {{"num_classes", 4}, {"vocab_size", 12}, {"seed", 5}}},
        {"data", {{"n_labeled", 16}, {"n_unlabeled", 32}, {"n_eval", 64}}},
        {"train",
         {{"method", "sclip"},
          {"n_paired_per_batch", 8},
          {"m_unpaired_per_batch", 8},
          {"epochs", 6},
          {"seed", 9}}},
        {"eval", {{"eval_every_epochs", 3}}},
        {"output_dir", (dir / "out").string()},
        {"methods_to_compare", {"supervised", "soft_pl", "sclip"}}};
    std::ofstream(cfg_path) << cfg.dump(2);
  }

  const std::string ds_path = (dir / "ds.scds").string();
  {
    auto r = run(bin, "generate-data --config " + cfg_path.string() + " --out " + ds_path, dir);
    check(r.exit_code == 0, "generate-data exits 0");
    check(r.output.find("16 paired") != std::string::npos, "generate-data prints counts");
    const std::string first = sclip::read_file(ds_path);
    run(bin, "generate-data --config " + cfg_path.string() + " --out " + ds_path, dir);
    check(sclip::read_file(ds_path) == first, "generate-data is byte-deterministic");
    check(fs::exists(ds_path + ".json"), "dataset sidecar exists");
  }

  {
    auto r = run(bin,
                 "train --config " + cfg_path.string() + " --data " + ds_path + " --summary",
                 dir);
    check(r.exit_code == 0, "train exits 0");
    const fs::path metrics = dir / "out" / "metrics.jsonl";
    check(fs::exists(metrics), "train writes metrics.jsonl");
    const std::string first = sclip::read_file(metrics.string());

    // schema: every line is standalone JSON with the stable field set
    std::istringstream lines(first);
    std::string line;
    int count = 0;
    bool schema_ok = true;
    while (std::getline(lines, line)) {
      const auto obj = nlohmann::json::parse(line, nullptr, false);
      schema_ok = schema_ok && !obj.is_discarded() && obj.value("v", 0) == 1 &&
                  obj.contains("method") && obj.contains("zero_shot_top1") &&
                  obj.contains("loss_clip") && obj.contains("r_at_1_img2txt");
      ++count;
    }
    check(schema_ok && count == 6, "metrics.jsonl has 6 schema-stable lines");

    auto rerun = run(
        bin, "train --config " + cfg_path.string() + " --data " + ds_path + " --summary", dir);
    check(rerun.exit_code == 0, "train rerun exits 0");
    check(sclip::read_file(metrics.string()) == first, "metrics.jsonl is byte-identical on rerun");
    check(fs::exists(dir / "out" / "summary.csv"), "summary.csv written");
    check(fs::exists(dir / "out" / "checkpoint_sclip.sckp"), "checkpoint written");

    auto eval = run(
        bin, "eval --checkpoint " + (dir / "out" / "checkpoint_sclip.sckp").string(), dir);
    check(eval.exit_code == 0, "eval exits 0");
    const auto report = nlohmann::json::parse(eval.output, nullptr, false);
    check(!report.is_discarded() && report.contains("zero_shot_top1"),
          "eval prints a JSON report");
  }

  {
    // dotted-path override fans out to a different method list
    auto r = run(bin,
                 "train --config " + cfg_path.string() + " --data " + ds_path +
                     " --set methods_to_compare=[\\\"supervised\\\"] --set train.epochs=3",
                 dir);
    check(r.exit_code == 0, "train with --set overrides exits 0");
    const std::string metrics = sclip::read_file((dir / "out" / "metrics.jsonl").string());
    check(metrics.find("sclip") == std::string::npos, "override limits methods");
  }

  {
    std::ofstream(dir / "cost.csv") << "0,1\n1,0\n";
    auto r = run(bin,
                 "sinkhorn --cost " + (dir / "cost.csv").string() + " --lambda 0.5 " +
                     "--iterations 200 --out " + (dir / "plan.csv").string(),
                 dir);
    check(r.exit_code == 0, "sinkhorn exits 0");
    check(r.output.find("row_residual") != std::string::npos, "sinkhorn prints residuals");
    const auto plan = sclip::parse_csv_matrix(sclip::read_file((dir / "plan.csv").string()));
    check(plan.rows() == 2 && std::fabs(plan(0, 0) + plan(0, 1) - 0.5) < 1e-9,
          "plan marginals are uniform");

    std::ofstream(dir / "ragged.csv") << "1,2,3\n4,5\n";
    auto bad = run(bin, "sinkhorn --cost " + (dir / "ragged.csv").string(), dir);
    check(bad.exit_code == 2, "ragged CSV exits 2");
    check(bad.output.find("line 2") != std::string::npos, "parse error names the row");

    auto bad_lambda =
        run(bin, "sinkhorn --cost " + (dir / "cost.csv").string() + " --lambda 0", dir);
    check(bad_lambda.exit_code == 3, "lambda 0 exits 3");
  }

  {
    std::ofstream(dir / "emb.csv") << "3,4\n0.6,0.8\n";
    auto r = run(bin,
                 "import-embeddings --in " + (dir / "emb.csv").string() + " --out " +
                     (dir / "emb.sclb").string(),
                 dir);
    check(r.exit_code == 0, "import-embeddings from CSV exits 0");
    auto again = run(bin, "import-embeddings --in " + (dir / "emb.sclb").string(), dir);
    check(again.exit_code == 0 && again.output.find("2 embeddings of dim 2") != std::string::npos,
          "binary embeddings re-import");

    std::ofstream(dir / "junk.sclb") << "SCLB1xx";
    auto junk = run(bin, "import-embeddings --in " + (dir / "junk.sclb").string(), dir);
    check(junk.exit_code == 2, "truncated embedding file exits 2 without crashing");

    std::ofstream(dir / "zero.csv") << "0,0\n1,0\n";
    auto zero = run(bin, "import-embeddings --in " + (dir / "zero.csv").string(), dir);
    check(zero.exit_code == 3, "zero row rejected with numeric exit code");

    auto missing = run(bin, "import-embeddings --in " + (dir / "missing.sclb").string(), dir);
    check(missing.exit_code == 4, "missing input file exits 4");
  }

  {
    auto r = run(bin, "grad-check --config " + cfg_path.string(), dir);
    check(r.exit_code == 0, "grad-check exits 0");
    check(r.output.find("max_rel_err") != std::string::npos, "grad-check prints the error");
  }

  {
    // invalid config: l_min = 0 names the field and exits 2
    nlohmann::json bad{{"world", {{"keywords_per_caption", {0, 2}}}}};
    std::ofstream(dir / "bad.json") << bad.dump();
    auto r = run(bin,
                 "generate-data --config " + (dir / "bad.json").string() + " --out " +
                     (dir / "nope.scds").string(),
                 dir);
    check(r.exit_code == 2, "invalid config exits 2");
    check(r.output.find("keywords_per_caption") != std::string::npos,
          "validation message names the field");
  }

  fs::remove_all(dir);
  if (failures == 0) {
    std::printf("all cli checks passed\n");
    return 0;
  }
  std::printf("%d cli checks failed\n", failures);
  return 1;
}
