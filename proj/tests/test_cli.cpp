#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "qeebm/checkpoint.hpp"
#include "qeebm/config.hpp"
#include "qeebm/runner.hpp"

using namespace qeebm;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

MetricsRecord sample_record(int epoch, const std::string& split, double qe, double oracle) {
  MetricsRecord r;
  r.run_id = "r1";
  r.algorithm = "qe-static";
  r.seed = 7;
  r.epoch = epoch;
  r.split = split;
  r.bleu_proxy = 12.5 + epoch;
  r.qe_score = qe;
  r.oracle_quality = oracle;
  r.loss = {2.25, -0.5, 2.0, 0.99, 0.001, 16, 16, 5, 0};
  r.alpha = 0.99;
  r.beta = 0.001;
  r.wall_clock = 0.1 * epoch;
  return r;
}

RunConfig tiny_run(const fs::path& out) {
  std::istringstream in(
      "seed = 4\n"
      "task.vocab = 10\n"
      "task.min_len = 2\n"
      "task.max_len = 4\n"
      "task.pool_size = 40\n"
      "task.valid_size = 6\n"
      "task.test_size = 6\n"
      "task.rating_size = 20\n"
      "model.d_model = 8\n"
      "model.ff = 16\n"
      "pretrain.max_steps = 20\n"
      "pretrain.eval_every = 10\n"
      "pretrain.abort_below = -1\n"
      "algorithm = qe-dynamic\n"
      "epochs = 2\n"
      "batch_labeled = 4\n"
      "batch_unlabeled = 4\n"
      "k = 2\n"
      "n = 2\n");
  RunConfig cfg = parse_config(in);
  cfg.out_dir = out;
  return cfg;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("checkpoints round-trip bitwise") {
    testing::TempDir dir("ckpt");
    EnergyNet qe(testing::small_dims(), 3);
    qe.attach_adapters(2, 4);
    testing::param(qe, "enc.adapter.up").value[0] = 0.25;
    save_checkpoint(dir.path / "a.ckpt", qe, ModelKind::kEnergy);

    EnergyNet back(testing::small_dims(), 99);
    back.attach_adapters(2, 98);
    for (auto& p : back.parameters()) p.frozen = false;
    load_checkpoint(dir.path / "a.ckpt", back, ModelKind::kEnergy);
    CHECK(back.hash() == qe.hash());
    for (std::size_t i = 0; i < qe.parameters().size(); ++i)
      CHECK(back.parameters()[i].frozen == qe.parameters()[i].frozen);

    save_checkpoint(dir.path / "b.ckpt", back, ModelKind::kEnergy);
    CHECK(slurp(dir.path / "a.ckpt") == slurp(dir.path / "b.ckpt"));
    CHECK_THROWS_AS(load_checkpoint(dir.path / "a.ckpt", back, ModelKind::kTask), CheckpointError);
  }

  TEST_CASE("corrupted or mismatched checkpoints are rejected") {
    TaskNet net(testing::small_dims(), 3);
    std::stringstream buf;
    save_checkpoint(buf, net, ModelKind::kTask);
    const std::string bytes = buf.str();

    std::string flipped = bytes;
    flipped[flipped.size() - 20] ^= 0x01;
    std::istringstream bad(flipped);
    TaskNet target(testing::small_dims(), 5);
    const auto before = target.hash();
    CHECK_THROWS_AS(load_checkpoint(bad, target, ModelKind::kTask), CheckpointError);
    CHECK(target.hash() == before);

    std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(truncated, target, ModelKind::kTask), CheckpointError);

    std::istringstream wrong_magic("XXXXXXXX" + bytes.substr(8));
    CHECK_THROWS_AS(load_checkpoint(wrong_magic, target, ModelKind::kTask), CheckpointError);

    TaskNet other(testing::small_dims(12), 5);
    std::istringstream good(bytes);
    CHECK_THROWS_AS(load_checkpoint(good, other, ModelKind::kTask), CheckpointError);

    std::istringstream fine(bytes);
    load_checkpoint(fine, target, ModelKind::kTask);
    CHECK(target.hash() == net.hash());
  }

  TEST_CASE("config parsing") {
    std::istringstream in("# comment\nalgorithm = ppo\n\nk = 3\ntask.vocab = 16\nseed = 9\nmono = false\n");
    const RunConfig c = parse_config(in);
    CHECK(c.trainer.algorithm == Algorithm::kPpo);
    CHECK(c.trainer.k == 3);
    CHECK(c.task.vocab == 16);
    CHECK(c.trainer.dims.vocab == 16);
    CHECK(c.task.seed == 9);
    CHECK(c.trainer.seed == 9);
    CHECK(c.pretrain.seed == 9);
    CHECK_FALSE(c.trainer.mono);

    auto key_of = [](const std::string& text) {
      std::istringstream s(text);
      try {
        parse_config(s);
      } catch (const ConfigError& e) {
        return e.key;
      }
      return std::string("<none>");
    };
    CHECK(key_of("bogus = 1\n") == "bogus");
    CHECK(key_of("k = 1\nk = 2\n") == "k");
    CHECK(key_of("k = two\n") == "k");
    CHECK(key_of("lr_task = nan\n") == "lr_task");
    CHECK(key_of("mono = maybe\n") == "mono");
    CHECK(key_of("algorithm = dpo\n") == "algorithm");
    CHECK(key_of("adapter_rank = 32\n") == "adapter_rank");
    CHECK(key_of("ablate.seeds = 1\n") == "ablate.seeds");
    CHECK(key_of("task.vocab = 6\n") == "task");
    CHECK(key_of("k = 4\n") == "<none>");
  }

  TEST_CASE("rendered config reads back unchanged") {
    RunConfig c;
    apply_setting(c, "algorithm", "qe-dynamic");
    apply_setting(c, "lr_energy", "0.000123456789");
    apply_setting(c, "adapters", "true");
    apply_setting(c, "out_dir", "runs/x");
    const std::string text = render_config(c);
    std::istringstream in(text);
    const RunConfig back = parse_config(in);
    CHECK(render_config(back) == text);
    for (const auto& k : config_keys()) CHECK(get_setting(back, k.name) == get_setting(c, k.name));
  }

  TEST_CASE("metrics records round-trip with exactly the documented fields") {
    const MetricsRecord r = sample_record(3, "valid", 0.123456789012345, 0.7);
    const std::string line = metrics_json(r);
    CHECK(line.find('\n') == std::string::npos);
    const MetricsRecord back = parse_metrics_json(line);
    CHECK(metrics_json(back) == line);
    CHECK(back.qe_score == r.qe_score);
    CHECK(back.loss.b_l == 16);
    CHECK(metrics_fields() == std::vector<std::string>{"run_id", "algorithm", "seed", "epoch", "split", "bleu_proxy",
                                                        "qe_score", "oracle_quality", "loss", "alpha", "beta",
                                                        "wall_clock"});
    CHECK_THROWS_AS(parse_metrics_json("{}"), std::invalid_argument);
    CHECK_THROWS_AS(parse_metrics_json(line.substr(0, line.size() - 2)), std::invalid_argument);
    std::string extra = line;
    extra.insert(1, "\"extra\":1,");
    CHECK_THROWS_AS(parse_metrics_json(extra), std::invalid_argument);
  }

  TEST_CASE("plot data is sorted by epoch and flags reward gaming") {
    testing::TempDir dir("plot");
    {
      std::ofstream f(dir.path / "m.jsonl");
      // Valid trace: qe rises at epoch 2 while oracle drops by 0.1.
      for (int e : {3, 1, 2}) {
        const double qe[] = {0, 0.5, 0.6, 0.55}, oracle[] = {0, 0.8, 0.7, 0.72};
        for (const char* s : {"train", "valid", "test"}) f << metrics_json(sample_record(e, s, qe[e], oracle[e])) << "\n";
      }
      f << "not json\n";
      f << metrics_json(sample_record(1, "holdout", 0.1, 0.1)) << "\n";
    }
    const auto res = plotdata({dir.path / "m.jsonl"}, dir.path / "out");
    CHECK(res.skipped == 2);
    REQUIRE(res.files.size() == 1);
    std::istringstream csv(slurp(res.files[0]));
    std::string header, line;
    std::getline(csv, header);
    CHECK(header.rfind("epoch,algorithm,seed,train_bleu_proxy", 0) == 0);
    CHECK(header.ends_with(",gaming_flag"));
    std::vector<std::string> rows;
    while (std::getline(csv, line)) rows.push_back(line);
    REQUIRE(rows.size() == 3);
    for (int i = 0; i < 3; ++i) {
      CHECK(rows[static_cast<std::size_t>(i)].rfind(std::to_string(i + 1) + ",qe-static,7,", 0) == 0);
      CHECK(rows[static_cast<std::size_t>(i)].back() == (i == 1 ? '1' : '0'));
    }
    CHECK_THROWS(plotdata({dir.path / "missing.jsonl"}, dir.path / "out"));
    std::ostringstream out, err;
    CHECK(cmd_plotdata({dir.path / "missing.jsonl"}, dir.path / "out", out, err) == 1);
  }

  TEST_CASE("ablation grid layout") {
    const auto grid = ablation_grid();
    REQUIRE(grid.size() == 16);
    std::set<std::string> labels;
    for (const auto& c : grid) labels.insert(c.label());
    CHECK(labels.size() == 16);
    for (const char* l : {"supervised", "supervised+filter", "reinforce-mono", "reinforce+mono", "ppo-mono", "ppo+mono",
                          "qe-static-mono", "qe-static+mono", "qe-static+mono+nn", "qe-static+mono+filter",
                          "qe-static+mono+filter+nn", "qe-dynamic-mono", "qe-dynamic+mono+filter+nn"})
      CHECK(labels.count(l) == 1);
    const std::string csv = ablation_csv({AblationRow{grid[0], 2, false, {1, 0.5, 0.25}, {0.1, 0.2, 0.3}}});
    CHECK(csv.rfind("algorithm,mono,filter,nn,status,seeds,bleu_proxy_mean,bleu_proxy_std,qe_score_mean,qe_score_std,"
                    "oracle_quality_mean,oracle_quality_std\n",
                    0) == 0);
    CHECK(csv.find("1.000000,0.100000,0.500000,0.200000,0.250000,0.300000") != std::string::npos);
  }

  TEST_CASE("a run writes its artifacts and repeats identically") {
    testing::TempDir dir("run");
    RunConfig cfg = tiny_run(dir.path / "a");
    std::ostringstream out, err;
    REQUIRE(cmd_run(cfg, out, err) == 0);
    for (const char* f : {"metrics.jsonl", "summary.json", "config.txt", "corpus/labeled.tsv", "corpus/unlabeled.txt"})
      CHECK(fs::exists(cfg.out_dir / f));

    std::vector<std::string> first;
    {
      std::ifstream in(cfg.out_dir / "metrics.jsonl");
      std::string line;
      while (std::getline(in, line)) {
        MetricsRecord r = parse_metrics_json(line);
        r.wall_clock = 0;
        first.push_back(metrics_json(r));
      }
    }
    CHECK(first.size() == 6);

    // Second run reuses the cached scorer from the first directory's key.
    cfg.out_dir = dir.path / "b";
    fs::create_directories(cfg.out_dir);
    for (const auto& e : fs::directory_iterator(dir.path / "a"))
      if (e.path().filename().string().rfind("scorer-", 0) == 0) fs::copy(e.path(), cfg.out_dir / e.path().filename());
    std::ostringstream out2, err2;
    REQUIRE(cmd_run(cfg, out2, err2) == 0);
    std::ifstream in(cfg.out_dir / "metrics.jsonl");
    std::string line;
    std::vector<std::string> second;
    while (std::getline(in, line)) {
      MetricsRecord r = parse_metrics_json(line);
      r.wall_clock = 0;
      second.push_back(metrics_json(r));
    }
    CHECK(first == second);
    CHECK(slurp(dir.path / "a" / "corpus" / "labeled.tsv") == slurp(cfg.out_dir / "corpus" / "labeled.tsv"));
  }
}
