#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "cli_run.hpp"
#include "oracles.hpp"
#include "psd/experiment.hpp"

using namespace psd;
namespace fs = std::filesystem;

namespace {

const char* kSmall = R"(data.num_classes = 4
data.samples_per_class = 30
data.holdout_per_class = 8
data.image_dim = 10
data.text_dim = 8
data.latent_dim = 5
model.hidden_dims = 12
model.embed_dim = 6
train.batch_size = 16
train.epochs = 2
eval.klist = 1,5
ablate.seeds = 1
)";

using clirun::cli;
using clirun::Run;
using clirun::slurp;

fs::path scratch(const std::string& name) {
    return clirun::scratch("psd_test_cli_" + name);
}

fs::path small_config(const fs::path& dir) {
    const fs::path p = dir / "small.cfg";
    std::ofstream(p) << kSmall;
    return p;
}

std::vector<Json> read_jsonl(const fs::path& p) {
    std::vector<Json> out;
    std::istringstream in(slurp(p));
    for (std::string line; std::getline(in, line);) out.push_back(Json::parse(line));
    return out;
}

} // namespace

TEST_CASE("generate reports exact corruption counts") {
    const fs::path dir = scratch("gen");
    Run r = cli("--out " + (dir / "a").string() + " --set data.mismatch_rate=0 generate");
    CHECK(r.code == 0);
    CHECK(r.out.find("corrupted: 0\n") != std::string::npos);

    r = cli("--out " + (dir / "b").string() + " --set data.samples_per_class=100 generate");
    CHECK(r.code == 0);
    CHECK(r.out.find("n: 1000\n") != std::string::npos);
    CHECK(r.out.find("corrupted: 300\n") != std::string::npos);
    CHECK(fs::exists(dir / "b" / "train.psdd"));
    CHECK(fs::exists(dir / "b" / "heldout.psdd"));
    CHECK(fs::exists(dir / "b" / "config.txt"));

    r = cli("--out " + (dir / "c").string() + " --set data.samples_per_class=100 generate");
    CHECK(slurp(dir / "b" / "train.psdd") == slurp(dir / "c" / "train.psdd"));
    r = cli("--seed 5 --out " + (dir / "d").string() + " --set data.samples_per_class=100 generate");
    CHECK(slurp(dir / "b" / "train.psdd") != slurp(dir / "d" / "train.psdd"));
}

TEST_CASE("train is deterministic and matches the library") {
    const fs::path dir = scratch("train");
    const std::string cfg = "--config " + small_config(dir).string();
    Run a = cli(cfg + " --out " + (dir / "a").string() + " train");
    Run b = cli(cfg + " --out " + (dir / "b").string() + " train");
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(a.out == b.out);
    for (const char* f : {"metrics.jsonl", "summary.json", "config.txt", "checkpoint/image.psdw",
                          "checkpoint/text.psdw", "checkpoint/state.psds"})
        CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

    ExperimentConfig c;
    c.merge_text(kSmall);
    std::ostringstream lib;
    run_training(c, make_datasets(c), &lib);
    CHECK(slurp(dir / "a" / "metrics.jsonl") == lib.str());

    Run n = cli(cfg + " --out " + (dir / "none").string() + " train --target-mode none");
    REQUIRE(n.code == 0);
    c.set("train.target_mode", "none");
    std::ostringstream lib_none;
    run_training(c, make_datasets(c), &lib_none);
    CHECK(slurp(dir / "none" / "metrics.jsonl") == lib_none.str());
    for (const Json& j : read_jsonl(dir / "none" / "metrics.jsonl")) CHECK(j["alpha"] == 1.0);
}

TEST_CASE("alpha schedules agree at the endpoints only") {
    const fs::path dir = scratch("sched");
    const std::string cfg = "--config " + small_config(dir).string() + " --set train.epochs=3";
    REQUIRE(cli(cfg + " --out " + (dir / "cos").string() + " train --alpha-schedule cosine").code == 0);
    REQUIRE(cli(cfg + " --out " + (dir / "lin").string() + " train --alpha-schedule linear").code == 0);
    std::vector<double> cos, lin;
    for (const Json& j : read_jsonl(dir / "cos" / "metrics.jsonl"))
        if (j["kind"] == "step") cos.push_back(j["alpha"]);
    for (const Json& j : read_jsonl(dir / "lin" / "metrics.jsonl"))
        if (j["kind"] == "step") lin.push_back(j["alpha"]);
    REQUIRE(cos.size() == lin.size());
    REQUIRE(cos.size() >= 3);
    CHECK(cos.front() == 0.8);
    CHECK(lin.front() == 0.8);
    CHECK(cos.back() == 0.2);
    CHECK(lin.back() == 0.2);
    CHECK(cos[cos.size() / 4] != lin[lin.size() / 4]);
}

namespace {

// Identity linear encoders, so evaluation sees the raw (normalized) features.
void write_identity_checkpoint(const fs::path& dir, Index d) {
    TrainResult r;
    EncoderSpec spec{d, {}, d, Activation::tanh};
    ParamSet p;
    p.spec = spec;
    p.layers.push_back(Layer{Matrix::identity(d), std::vector<double>(d, 0.0)});
    r.model.image = p;
    r.model.text = p;
    r.model.temperature = TemperatureParam::from_temperature(0.07);
    r.optimizer.m.assign(2 * p.parameter_count() + 1, 0.0);
    r.optimizer.v.assign(2 * p.parameter_count() + 1, 0.0);
    save_checkpoint(dir.string(), r);
}

PairedDataset paired(const Matrix& v, const Matrix& t, const std::vector<std::uint32_t>& labels, Index k) {
    PairedDataset ds;
    ds.image_features = v;
    ds.text_features = t;
    for (Index i = 0; i < v.rows(); ++i) ds.pairing.push_back({i});
    ds.labels = labels;
    ds.corrupted.assign(v.rows(), 0);
    ds.num_classes = k;
    return ds;
}

Json eval_cli(const fs::path& dir, const PairedDataset& ds, const std::string& klist) {
    save_pairs(ds, (dir / "eval.psdd").string());
    const Run r = cli("--set eval.linear_probe=false eval --checkpoint " + (dir / "ckpt").string() +
                      " --dataset " + (dir / "eval.psdd").string() + " --klist " + klist);
    REQUIRE(r.code == 0);
    return Json::parse(r.out);
}

} // namespace

TEST_CASE("eval smoke cases against oracles") {
    const fs::path dir = scratch("eval");
    const Index d = 4;
    write_identity_checkpoint(dir / "ckpt", d);

    SUBCASE("diagonal") {
        const Matrix e = Matrix::identity(d);
        const Json j = eval_cli(dir, paired(e, e, {0, 1, 2, 3}, 4), "1,2");
        CHECK(j["text_to_image"]["recall_at"]["1"] == 100.0);
        CHECK(j["image_to_text"]["mean_rank"] == 1.0);
        CHECK(j["zero_shot_top1"] == 100.0);
        CHECK(j["similarity"]["mean_positive"] == 1.0);
        CHECK(j["similarity"]["mean_negative"] == 0.0);
    }
    SUBCASE("anti-diagonal") {
        // each caption points away from its image, so the partner ranks last
        const Matrix v = Matrix::identity(d);
        Matrix t(d, d, 1.0);
        for (Index i = 0; i < d; ++i) t(i, i) = -1.0;
        const Json j = eval_cli(dir, paired(v, t, {0, 0, 1, 1}, 2), "1,4");
        CHECK(j["text_to_image"]["recall_at"]["1"] == 0.0);
        CHECK(j["text_to_image"]["recall_at"]["4"] == 100.0);
        CHECK(j["image_to_text"]["mean_rank"] == 4.0);
    }
    SUBCASE("random instance") {
        Rng rng(11);
        const Index n = 30;
        Matrix v(n, d), t(n, d);
        for (double& x : v.data()) x = rng.gaussian();
        for (double& x : t.data()) x = 0.5 * rng.gaussian();
        for (Index i = 0; i < n; ++i)
            for (Index c = 0; c < d; ++c) t(i, c) += v(i, c);
        std::vector<std::uint32_t> labels(n);
        for (Index i = 0; i < n; ++i) labels[i] = static_cast<std::uint32_t>(i % 3);
        const Json j = eval_cli(dir, paired(v, t, labels, 3), "1,5,10");

        oracle::Mat ov = oracle::to_mat(v), ot = oracle::to_mat(t);
        auto unit = [](oracle::Mat& m) {
            for (auto& r : m) {
                double s = 0.0;
                for (double x : r) s += x * x;
                for (double& x : r) x /= std::sqrt(s);
            }
        };
        unit(ov);
        unit(ot);
        const auto t2i = oracle::ranks(ot, ov), i2t = oracle::ranks(ov, ot);
        for (Index k : {1, 5, 10}) {
            CHECK(j["text_to_image"]["recall_at"][std::to_string(k)].get<double>() == oracle::recall_at(t2i, k));
            CHECK(j["image_to_text"]["recall_at"][std::to_string(k)].get<double>() == oracle::recall_at(i2t, k));
        }
        CHECK(j["text_to_image"]["mean_rank"].get<double>() == doctest::Approx(oracle::mean_rank(t2i)).epsilon(1e-12));

        oracle::Mat protos(3, oracle::Vec(d, 0.0));
        for (Index i = 0; i < n; ++i)
            for (Index c = 0; c < d; ++c) protos[labels[i]][c] += t(i, c) / 10.0;
        unit(protos);
        CHECK(j["zero_shot_top1"].get<double>() == oracle::zero_shot(ov, protos, labels));
    }
}

TEST_CASE("gradcheck and ablate commands") {
    const fs::path dir = scratch("misc");
    Run g = cli("--out " + dir.string() + " gradcheck --seeds 20");
    CHECK(g.code == 0);
    CHECK(g.out.find("all checks passed") != std::string::npos);
    CHECK(fs::exists(dir / "gradcheck.json"));

    Run a = cli("--config " + small_config(dir).string() + " --out " + (dir / "ab").string() + " ablate");
    REQUIRE(a.code == 0);
    const Json j = Json::parse(slurp(dir / "ab" / "ablation.json"));
    CHECK(j["rows"].size() == 4);
    for (const char* row : kAblationRows) CHECK(a.out.find(row) != std::string::npos);
    CHECK(a.out.find("win/loss") != std::string::npos);
}

TEST_CASE("failures map to named exit codes") {
    const fs::path dir = scratch("fail");
    CHECK(cli("--set no.such=1 --out " + dir.string() + " generate").code == 3);
    CHECK(cli("--set train.epochs=zero --out " + dir.string() + " generate").code == 3);
    CHECK(cli("eval --checkpoint " + (dir / "missing").string()).code == 6);
    CHECK(cli("").code == 2);
    CHECK(cli("train").code == 2);

    write_identity_checkpoint(dir / "ckpt", 3);
    std::string state = slurp(dir / "ckpt" / "state.psds");
    state[1] = 'X';
    std::ofstream(dir / "ckpt" / "state.psds", std::ios::binary | std::ios::trunc) << state;
    CHECK(cli("eval --checkpoint " + (dir / "ckpt").string()).code == 5);

    std::ofstream(dir / "bad.psdd", std::ios::binary) << "PSDD";
    CHECK(cli("--out " + (dir / "t").string() + " train --dataset " + (dir / "bad.psdd").string()).code == 5);
}
