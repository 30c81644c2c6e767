#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "asrlab/harness.hpp"

using namespace asrlab;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("asrlab_harness_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string write_file(const TempDir& dir, const std::string& name, const std::string& body) {
  const std::string p = dir.file(name);
  std::ofstream out(p, std::ios::binary);
  out << body;
  return p;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTinySpec = R"(# tiny but complete pipeline
[corpus]
count = 10
eval_count = 5
min_len = 3
max_len = 4
feat_dim = 4
noise_level = 0.05
seed = 7
eval_seed = 8
vocab = abcd

[tokenizer]
mode = oracle
sub_rate = 0.1
seed = 3

[model]
lambda = 0.0,0.5,1.0
d_enc = 8
enc_blocks = 1
d_model = 16
dec_blocks = 1
heads = 2
steps = 3
batch_size = 4
seed = 11

[decode]
strategy = ar,nar,hybrid

[run]
seed = 1
threads = 1
)";

int data_rows(const std::string& report) {
  std::istringstream is(report);
  std::string line;
  int rows = 0;
  bool header_seen = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    ++rows;
  }
  return rows;
}

}  // namespace

TEST_CASE("spec parsing: sections, lists, overrides") {
  TempDir dir;
  const std::string path = write_file(dir, "spec.ini", kTinySpec);
  const ExperimentSpec spec = load_spec(path);
  CHECK(spec.train_corpus.count == 10);
  CHECK(spec.eval_count == 5);
  CHECK(spec.vocab_symbols == "abcd");
  CHECK(spec.lambdas == std::vector<double>{0.0, 0.5, 1.0});
  REQUIRE(spec.strategies.size() == 3);
  CHECK(spec.strategies[1] == DecodeStrategy::kNar);
  CHECK(spec.tokenizer.profile.sub_rate == 0.1);
  CHECK(spec.training.steps == 3);
  CHECK(spec.decode.sigma == 1.5);  // default materialized
}

TEST_CASE("spec parsing error paths") {
  TempDir dir;
  CHECK_THROWS_AS(load_spec(dir.file("missing.ini")), StageError);
  auto expect_config_error = [&](const char* name, const std::string& body) {
    const std::string p = write_file(dir, name, body);
    try {
      load_spec(p);
      FAIL("expected StageError");
    } catch (const StageError& e) {
      CHECK(e.stage() == Stage::kConfig);
      CHECK(e.exit_code() == 2);
    }
  };
  expect_config_error("bad1.ini", "[decode]\nstrategy = warp\n");
  expect_config_error("bad2.ini", "[tokenizer]\nmode = banana\n");
  expect_config_error("bad3.ini", "[corpus]\nthis line has no equals sign\n");
  expect_config_error("bad4.ini", "[model]\ncheckpoint = x\nlambda = 0.0,0.5\n");
  expect_config_error("bad5.ini", "[corpus]\nvocab =\n");
}

TEST_CASE("run_experiment emits a 9-row sweep report, deterministically") {
  TempDir dir;
  const std::string spec_path = write_file(dir, "spec.ini", kTinySpec);
  ExperimentSpec spec = load_spec(spec_path);
  spec.out_dir = dir.file("out1");
  const ExperimentOutput out1 = run_experiment(spec);
  const std::string report1 = read_file(out1.report_path);
  CHECK(data_rows(report1) == 9);
  CHECK(report1.find("model\tlambda\tmode\tcer_pct\tins\tdel\tsub\tdrr_permille\trtf\t"
                     "model_calls") != std::string::npos);
  CHECK(fs::exists(out1.records_path));
  CHECK(fs::exists(out1.timing_path));

  spec.out_dir = dir.file("out2");
  spec.threads = 3;
  const ExperimentOutput out2 = run_experiment(spec);
  CHECK(read_file(out2.report_path) == report1);
  // records are deterministic except for the trailing wall-time column
  auto strip_wall = [](const std::string& body) {
    std::istringstream is(body);
    std::string line;
    std::string out;
    while (std::getline(is, line)) {
      out += line.substr(0, line.rfind('\t'));
      out += '\n';
    }
    return out;
  };
  CHECK(strip_wall(read_file(out2.records_path)) == strip_wall(read_file(out1.records_path)));
}

TEST_CASE("missing checkpoint aborts in the model stage with no partial outputs") {
  TempDir dir;
  const std::string spec_path = write_file(dir, "spec.ini", kTinySpec);
  ExperimentSpec spec = load_spec(spec_path);
  spec.out_dir = dir.file("out");
  spec.checkpoint = dir.file("no_such_checkpoint");
  spec.lambdas = {0.5};
  try {
    run_experiment(spec);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::kModel);
    CHECK(std::string(e.what()).find("model stage") != std::string::npos);
  }
  CHECK_FALSE(fs::exists(spec.out_dir + "/report.tsv"));
  CHECK_FALSE(fs::exists(spec.out_dir + "/records.tsv"));
}

TEST_CASE("invalid tokenizer profile aborts in the tokenizer stage") {
  TempDir dir;
  const std::string spec_path = write_file(dir, "spec.ini", kTinySpec);
  ExperimentSpec spec = load_spec(spec_path);
  spec.out_dir = dir.file("out");
  spec.tokenizer.profile.sub_rate = 0.8;
  spec.tokenizer.profile.del_rate = 0.8;  // sum > 1
  try {
    run_experiment(spec);
    FAIL("expected StageError");
  } catch (const StageError& e) {
    CHECK(e.stage() == Stage::kTokenizer);
  }
}

TEST_CASE("compare_runs: identical reports give zero deltas") {
  TempDir dir;
  const std::string spec_path = write_file(dir, "spec.ini", kTinySpec);
  ExperimentSpec spec = load_spec(spec_path);
  spec.out_dir = dir.file("out");
  const ExperimentOutput out = run_experiment(spec);
  const std::string table = compare_runs(out.report_path, {out.report_path});
  std::istringstream is(table);
  std::string line;
  std::getline(is, line);  // header
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    std::istringstream row(line);
    std::string path, lambda, mode;
    double cer, d_cer, d_cer_rel, drr, d_drr, rtf, d_rtf_rel;
    row >> path >> lambda >> mode >> cer >> d_cer >> d_cer_rel >> drr >> d_drr >> rtf >>
        d_rtf_rel;
    CHECK(d_cer == 0.0);
    CHECK(d_cer_rel == 0.0);
    CHECK(d_drr == 0.0);
    CHECK(d_rtf_rel == 0.0);
  }
  CHECK(rows == 9);
}

TEST_CASE("compare_runs computes relative CER deltas") {
  TempDir dir;
  const std::string header =
      "# eval.fingerprint = 42\n"
      "model\tlambda\tmode\tcer_pct\tins\tdel\tsub\tdrr_permille\trtf\tmodel_calls\n";
  const std::string base = write_file(
      dir, "base.tsv", header + "audio-llm\t0.50\tar\t9.18\t1\t2\t3\t3.00\t0.3900\t100\n");
  const std::string cand = write_file(
      dir, "cand.tsv", header + "audio-llm\t0.50\tar\t8.09\t1\t2\t3\t0.00\t0.0400\t50\n");
  const std::string table = compare_runs(base, {cand});
  // 100 * (8.09 - 9.18) / 9.18 = -11.87%
  CHECK(table.find("-11.87") != std::string::npos);
  CHECK(table.find("-1.09") != std::string::npos);
  CHECK(table.find("-3.00") != std::string::npos);
}

TEST_CASE("compare_runs error paths") {
  TempDir dir;
  const std::string header =
      "model\tlambda\tmode\tcer_pct\tins\tdel\tsub\tdrr_permille\trtf\tmodel_calls\n";
  const std::string base =
      write_file(dir, "base.tsv", "# eval.fingerprint = 1\n" + header +
                                      "audio-llm\t0.50\tar\t9.18\t1\t2\t3\t3.00\t0.39\t100\n");
  const std::string other_set =
      write_file(dir, "other.tsv", "# eval.fingerprint = 2\n" + header +
                                       "audio-llm\t0.50\tar\t9.18\t1\t2\t3\t3.00\t0.39\t100\n");
  CHECK_THROWS_WITH(compare_runs(base, {other_set}), doctest::Contains("disjoint"));

  const std::string missing_row =
      write_file(dir, "missing.tsv", "# eval.fingerprint = 1\n" + header +
                                         "audio-llm\t0.50\tnar\t9.18\t1\t2\t3\t3.00\t0.39\t100\n");
  CHECK_THROWS_WITH(compare_runs(base, {missing_row}), doctest::Contains("0.50|nar"));
  CHECK_THROWS_AS(compare_runs(dir.file("nope.tsv"), {base}), std::runtime_error);
}

TEST_CASE("report header materializes the spec") {
  TempDir dir;
  const std::string spec_path = write_file(dir, "spec.ini", kTinySpec);
  ExperimentSpec spec = load_spec(spec_path);
  spec.out_dir = dir.file("out");
  const ExperimentOutput out = run_experiment(spec);
  const std::string report = read_file(out.report_path);
  for (const char* key :
       {"# corpus.count = 10", "# corpus.vocab = abcd", "# tokenizer.mode = oracle",
        "# model.steps = 3", "# decode.sigma = 1.5000", "# run.seed = 1",
        "# eval.fingerprint = "}) {
    CAPTURE(key);
    CHECK(report.find(key) != std::string::npos);
  }
}
