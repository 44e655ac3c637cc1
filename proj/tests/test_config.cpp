#include "deft/config.hpp"

#include <gtest/gtest.h>

#include <string>

namespace deft {
namespace {

std::string error_of(const std::string& text) {
    try {
        const auto c = parse_config(text, "cfg.toml");
        validate(c, "cfg.toml");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

TEST(ParseConfig, ReadsEveryKind) {
    const auto c = parse_config(R"(# comment
model = mlp
mlp_hidden = 32        # trailing comment
mlp_activation = relu
workers = 8
iterations = 300
learning_rate = 0.5
lr_decay_at = [100, 200]
sparsifier = "cltk"
density = 0.02
seed = 7
mode = concurrent
strict_alg1 = false
timings = false
out = "runs/a#b"
sweep_workers = [1, 2, 4]
sweep_sparsifiers = [topk, deft]
)");
    EXPECT_EQ(c.model.kind, ModelKind::mlp);
    EXPECT_EQ(c.model.mlp.hidden, 32u);
    EXPECT_EQ(c.model.mlp.activation, Activation::relu);
    EXPECT_EQ(c.train.n_workers, 8u);
    EXPECT_EQ(c.train.lr_decay_at, (std::vector<std::size_t>{100, 200}));
    EXPECT_EQ(c.train.sparsifier.kind, SparsifierKind::cltk);
    EXPECT_EQ(c.train.sparsifier.density, 0.02);
    EXPECT_EQ(c.train.seed, 7u);
    EXPECT_TRUE(c.seed_set);
    EXPECT_EQ(c.train.mode, ExecutionMode::concurrent);
    EXPECT_EQ(c.train.fill, ValueFill::zero_fill);
    EXPECT_FALSE(c.timings);
    EXPECT_EQ(c.out_dir, "runs/a#b");
    EXPECT_EQ(c.sweep.workers, (std::vector<std::size_t>{1, 2, 4}));
    EXPECT_EQ(c.sweep.sparsifiers, (std::vector<SparsifierKind>{SparsifierKind::topk, SparsifierKind::deft}));
}

TEST(ParseConfig, RoundTripsThroughCanonicalText) {
    auto c = parse_config("model = block_quadratic\ntensor_sizes = [10, 20, 30]\nblock_scales = [3, 2, 0.5]\n"
                          "seed = 11\nsweep_densities = [0.1, 0.25]\nlearning_rate = 0.0125\n");
    const auto text = to_config_text(c);
    const auto back = parse_config(text);
    EXPECT_EQ(to_config_text(back), text);
    EXPECT_EQ(back.model.quadratic.block_scales, (std::vector<double>{3, 2, 0.5}));
    EXPECT_EQ(back.train.learning_rate, 0.0125);
    EXPECT_EQ(back.sweep.densities, (std::vector<double>{0.1, 0.25}));
}

TEST(ParseConfig, ErrorsNameTheLine) {
    EXPECT_EQ(error_of("workers = 4\nbogus = 1\n"), "cfg.toml:2: bogus: unknown key");
    EXPECT_EQ(error_of("\n\nworkers = four\n"), "cfg.toml:3: workers: expected a non-negative integer, got 'four'");
    EXPECT_EQ(error_of("sparsifier = dgc\n"),
              "cfg.toml:1: sparsifier: unknown sparsifier 'dgc' (expected deft, topk, cltk or hard_threshold)");
    EXPECT_EQ(error_of("workers = 2\nworkers = 3\n"), "cfg.toml:2: workers: duplicate key (first set on line 1)");
    EXPECT_EQ(error_of("just words\n"), "cfg.toml:1: expected 'key = value'");
    EXPECT_EQ(error_of("strict_alg1 = maybe\n"), "cfg.toml:1: strict_alg1: expected true or false, got 'maybe'");
    EXPECT_EQ(error_of("lr_decay_at = 5\n"), "cfg.toml:1: lr_decay_at: expected a [list]");
}

TEST(Validate, CrossKeyErrorsNameTheResponsibleLine) {
    EXPECT_EQ(error_of("model = block_quadratic\ndensity = 0.00001\n"),
              "cfg.toml:2: density: density 1e-05 selects nothing from 4000 parameters");
    EXPECT_EQ(error_of("tensor_sizes = [5, 5]\nblock_scales = [1, 1]\nsweep_workers = [2, 20]\n"),
              "cfg.toml:3: sweep_workers: more workers than parameters (20 > 10)");
    EXPECT_EQ(error_of("tensor_sizes = [5, 5]\nblock_scales = [1]\n"),
              "cfg.toml:2: block_scales: block_scales must have one entry per tensor");
    EXPECT_EQ(error_of("learning_rate = 0\n"), "cfg.toml:1: learning_rate: must be > 0");
    EXPECT_EQ(error_of("density = 1.5\n"), "cfg.toml:1: density: invalid density 1.5");
    EXPECT_EQ(error_of("sparsifier = hard_threshold\nthreshold = 0.3\ndensity = 1.5\n"), "");
}

TEST(Sweep, CrossProductInOrder) {
    auto c = parse_config("sweep_sparsifiers = [topk, cltk, deft]\nsweep_workers = [1, 2, 4, 8, 16]\n");
    const auto points = expand_sweep(c);
    ASSERT_EQ(points.size(), 15u);
    EXPECT_EQ(artifact_stem(points.front()), "topk_n1_d0.01");
    EXPECT_EQ(artifact_stem(points.back()), "deft_n16_d0.01");
    for (const auto& p : points) EXPECT_TRUE(p.sweep.empty());
}

TEST(Sweep, NoAxesIsOnePoint) {
    const auto points = expand_sweep(parse_config("workers = 3\ndensity = 0.05\nsparsifier = deft\n"));
    ASSERT_EQ(points.size(), 1u);
    EXPECT_EQ(artifact_stem(points[0]), "deft_n3_d0.05");
}

}  // namespace
}  // namespace deft
