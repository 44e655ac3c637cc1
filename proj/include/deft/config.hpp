#pragma once

// Run configuration files.
//
// The format is a flat list of `key = value` lines (a TOML subset): `#` starts
// a comment, values are numbers, booleans, bare words, "quoted strings" or
// [comma, separated, lists]. Every error names the offending line.

#include "deft/collectives.hpp"
#include "deft/metrics.hpp"
#include "deft/models.hpp"
#include "deft/sparsifiers.hpp"
#include "deft/trainer.hpp"

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace deft {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SweepAxes {
    std::vector<std::size_t> workers;
    std::vector<double> densities;
    std::vector<SparsifierKind> sparsifiers;

    bool empty() const noexcept { return workers.empty() && densities.empty() && sparsifiers.empty(); }
};

struct RunConfig {
    ModelSpec model;
    TrainConfig train;
    std::string out_dir = "results";
    SweepAxes sweep;
    /// When false, timing columns are written as zeros so artifacts are byte-reproducible.
    bool timings = true;
    double alpha = 1.0;
    double beta = 0.001;
    bool seed_set = false;
    /// Line each key was read from, for diagnostics.
    std::map<std::string, std::size_t, std::less<>> key_lines;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Strips a trailing comment that is not inside a quoted string.
inline std::string_view strip_comment(std::string_view s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') {
            quoted = !quoted;
        } else if (s[i] == '#' && !quoted) {
            return s.substr(0, i);
        }
    }
    return s;
}

class ConfigLine {
public:
    ConfigLine(std::string source, std::size_t line, std::string key, std::string value)
        : source_(std::move(source)), line_(line), key_(std::move(key)), value_(std::move(value)) {}

    [[noreturn]] void fail(const std::string& msg) const {
        throw ConfigError(source_ + ":" + std::to_string(line_) + ": " + key_ + ": " + msg);
    }

    std::string text() const {
        std::string_view v = value_;
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') {
            return std::string(v.substr(1, v.size() - 2));
        }
        if (v.empty()) {
            fail("missing value");
        }
        return std::string(v);
    }

    double number() const { return parse_double(value_); }

    std::uint64_t count() const { return parse_count(value_); }

    bool boolean() const {
        if (value_ == "true") return true;
        if (value_ == "false") return false;
        fail("expected true or false, got '" + value_ + "'");
    }

    std::vector<std::string> items() const {
        std::string_view v = value_;
        if (v.size() < 2 || v.front() != '[' || v.back() != ']') {
            fail("expected a [list]");
        }
        std::vector<std::string> out;
        v = trim(v.substr(1, v.size() - 2));
        if (v.empty()) {
            return out;
        }
        while (true) {
            const auto comma = v.find(',');
            auto item = trim(v.substr(0, comma));
            if (item.size() >= 2 && item.front() == '"' && item.back() == '"') {
                item = item.substr(1, item.size() - 2);
            }
            if (item.empty()) {
                fail("empty list element");
            }
            out.emplace_back(item);
            if (comma == std::string_view::npos) {
                break;
            }
            v = v.substr(comma + 1);
        }
        return out;
    }

    std::vector<double> numbers() const {
        std::vector<double> out;
        for (const auto& s : items()) {
            out.push_back(parse_double(s));
        }
        return out;
    }

    std::vector<std::size_t> counts() const {
        std::vector<std::size_t> out;
        for (const auto& s : items()) {
            out.push_back(static_cast<std::size_t>(parse_count(s)));
        }
        return out;
    }

    const std::string& key() const noexcept { return key_; }

private:
    double parse_double(const std::string& s) const {
        double v = 0.0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
            fail("expected a number, got '" + s + "'");
        }
        return v;
    }

    std::uint64_t parse_count(const std::string& s) const {
        std::uint64_t v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
            fail("expected a non-negative integer, got '" + s + "'");
        }
        return v;
    }

    std::string source_;
    std::size_t line_;
    std::string key_;
    std::string value_;
};

inline SparsifierKind sparsifier_kind_of(const ConfigLine& l, const std::string& s) {
    if (auto k = parse_sparsifier_kind(s)) {
        return *k;
    }
    l.fail("unknown sparsifier '" + s + "' (expected deft, topk, cltk or hard_threshold)");
}

using Setter = std::function<void(RunConfig&, const ConfigLine&)>;

inline const std::map<std::string, Setter, std::less<>>& setters() {
    static const std::map<std::string, Setter, std::less<>> table = {
        {"model",
         [](RunConfig& c, const ConfigLine& l) {
             const auto v = l.text();
             if (v == "block_quadratic") c.model.kind = ModelKind::block_quadratic;
             else if (v == "mlp") c.model.kind = ModelKind::mlp;
             else l.fail("unknown model '" + v + "' (expected block_quadratic or mlp)");
         }},
        {"tensor_sizes", [](RunConfig& c, const ConfigLine& l) { c.model.quadratic.tensor_sizes = l.counts(); }},
        {"block_scales", [](RunConfig& c, const ConfigLine& l) { c.model.quadratic.block_scales = l.numbers(); }},
        {"noise", [](RunConfig& c, const ConfigLine& l) { c.model.quadratic.noise = l.number(); }},
        {"mlp_inputs", [](RunConfig& c, const ConfigLine& l) { c.model.mlp.inputs = l.count(); }},
        {"mlp_hidden", [](RunConfig& c, const ConfigLine& l) { c.model.mlp.hidden = l.count(); }},
        {"mlp_classes", [](RunConfig& c, const ConfigLine& l) { c.model.mlp.classes = l.count(); }},
        {"mlp_activation",
         [](RunConfig& c, const ConfigLine& l) {
             const auto v = l.text();
             if (v == "tanh") c.model.mlp.activation = Activation::tanh;
             else if (v == "relu") c.model.mlp.activation = Activation::relu;
             else l.fail("unknown activation '" + v + "' (expected tanh or relu)");
         }},
        {"mlp_dataset_size", [](RunConfig& c, const ConfigLine& l) { c.model.mlp.dataset_size = l.count(); }},
        {"mlp_separation", [](RunConfig& c, const ConfigLine& l) { c.model.mlp.separation = l.number(); }},
        {"batch_size", [](RunConfig& c, const ConfigLine& l) { c.model.mlp.batch_size = l.count(); }},
        {"workers", [](RunConfig& c, const ConfigLine& l) { c.train.n_workers = l.count(); }},
        {"iterations", [](RunConfig& c, const ConfigLine& l) { c.train.iterations = l.count(); }},
        {"learning_rate", [](RunConfig& c, const ConfigLine& l) { c.train.learning_rate = l.number(); }},
        {"lr_decay_at", [](RunConfig& c, const ConfigLine& l) { c.train.lr_decay_at = l.counts(); }},
        {"lr_decay_factor", [](RunConfig& c, const ConfigLine& l) { c.train.lr_decay_factor = l.number(); }},
        {"sparsifier",
         [](RunConfig& c, const ConfigLine& l) { c.train.sparsifier.kind = sparsifier_kind_of(l, l.text()); }},
        {"density", [](RunConfig& c, const ConfigLine& l) { c.train.sparsifier.density = l.number(); }},
        {"threshold", [](RunConfig& c, const ConfigLine& l) { c.train.sparsifier.threshold = l.number(); }},
        {"seed",
         [](RunConfig& c, const ConfigLine& l) {
             c.train.seed = l.count();
             c.seed_set = true;
         }},
        {"mode",
         [](RunConfig& c, const ConfigLine& l) {
             const auto v = l.text();
             if (v == "lockstep") c.train.mode = ExecutionMode::lockstep;
             else if (v == "concurrent") c.train.mode = ExecutionMode::concurrent;
             else l.fail("unknown mode '" + v + "' (expected lockstep or concurrent)");
         }},
        {"strict_alg1",
         [](RunConfig& c, const ConfigLine& l) {
             c.train.fill = l.boolean() ? ValueFill::strict_alg1 : ValueFill::zero_fill;
         }},
        {"eval_every", [](RunConfig& c, const ConfigLine& l) { c.train.eval_every = l.count(); }},
        {"timings", [](RunConfig& c, const ConfigLine& l) { c.timings = l.boolean(); }},
        {"alpha", [](RunConfig& c, const ConfigLine& l) { c.alpha = l.number(); }},
        {"beta", [](RunConfig& c, const ConfigLine& l) { c.beta = l.number(); }},
        {"out", [](RunConfig& c, const ConfigLine& l) { c.out_dir = l.text(); }},
        {"sweep_workers", [](RunConfig& c, const ConfigLine& l) { c.sweep.workers = l.counts(); }},
        {"sweep_densities", [](RunConfig& c, const ConfigLine& l) { c.sweep.densities = l.numbers(); }},
        {"sweep_sparsifiers",
         [](RunConfig& c, const ConfigLine& l) {
             c.sweep.sparsifiers.clear();
             for (const auto& s : l.items()) {
                 c.sweep.sparsifiers.push_back(sparsifier_kind_of(l, s));
             }
         }},
    };
    return table;
}

}  // namespace detail

/// Applies one `key = value` assignment, as if it were line `line` of `source`.
inline void apply_setting(RunConfig& config, std::string_view key, std::string_view value,
                          const std::string& source = "<override>", std::size_t line = 0) {
    const detail::ConfigLine l(source, line, std::string(key), std::string(detail::trim(value)));
    const auto& table = detail::setters();
    const auto it = table.find(key);
    if (it == table.end()) {
        l.fail("unknown key");
    }
    it->second(config, l);
}

/// Checks value ranges that need more than one key to decide. The error
/// names the line of the key most directly at fault when it is known.
inline void validate(const RunConfig& c, const std::string& source = "<config>") {
    auto fail = [&](std::string_view key, const std::string& msg) {
        const auto it = c.key_lines.find(key);
        if (it != c.key_lines.end()) {
            throw ConfigError(source + ":" + std::to_string(it->second) + ": " + std::string(key) + ": " + msg);
        }
        throw ConfigError(source + ": " + std::string(key) + ": " + msg);
    };
    auto swept = [&](std::string_view key, bool sweeping) { return sweeping ? "sweep_" + std::string(key) : std::string(key); };

    std::unique_ptr<Model> model;
    try {
        model = make_model(c.model, c.train.seed);
    } catch (const std::invalid_argument& e) {
        const std::string msg = e.what();
        const auto& m = c.model.mlp;
        std::string_view key = "tensor_sizes";
        if (c.model.kind == ModelKind::mlp) {
            key = m.inputs < 2         ? "mlp_inputs"
                  : m.hidden == 0      ? "mlp_hidden"
                  : m.classes < 2      ? "mlp_classes"
                  : m.dataset_size == 0 ? "mlp_dataset_size"
                                        : "batch_size";
        } else if (msg.find("block_scales") != std::string::npos) {
            key = "block_scales";
        } else if (msg.find("noise") != std::string::npos) {
            key = "noise";
        }
        fail(key, msg);
    }
    const std::size_t n_g = model->layout().n_g();

    if (c.train.iterations == 0) fail("iterations", "must be >= 1");
    if (!(c.train.learning_rate > 0.0)) fail("learning_rate", "must be > 0");
    if (!(c.train.lr_decay_factor > 0.0)) fail("lr_decay_factor", "must be > 0");
    if (c.train.eval_every == 0) fail("eval_every", "must be >= 1");
    if (!(c.alpha > 0.0)) fail("alpha", "must be > 0");
    if (!(c.beta > 0.0)) fail("beta", "must be > 0");
    if (!(c.train.sparsifier.threshold >= 0.0)) fail("threshold", "must be >= 0");

    const bool sweep_n = !c.sweep.workers.empty();
    const bool sweep_d = !c.sweep.densities.empty();
    const bool sweep_k = !c.sweep.sparsifiers.empty();
    const auto workers = sweep_n ? c.sweep.workers : std::vector<std::size_t>{c.train.n_workers};
    const auto densities = sweep_d ? c.sweep.densities : std::vector<double>{c.train.sparsifier.density};
    const auto kinds = sweep_k ? c.sweep.sparsifiers : std::vector<SparsifierKind>{c.train.sparsifier.kind};
    for (std::size_t n : workers) {
        if (n == 0) fail(swept("workers", sweep_n), "must be >= 1");
        if (n > n_g) {
            fail(swept("workers", sweep_n),
                 "more workers than parameters (" + std::to_string(n) + " > " + std::to_string(n_g) + ")");
        }
    }
    const bool k_based = std::any_of(kinds.begin(), kinds.end(),
                                     [](SparsifierKind k) { return k != SparsifierKind::hard_threshold; });
    if (k_based) {
        for (double d : densities) {
            if (!(d > 0.0) || d > 1.0) fail(swept("density", sweep_d), "invalid density " + format_number(d));
            if (std::llround(d * static_cast<double>(n_g)) < 1) {
                fail(swept("density", sweep_d), "density " + format_number(d) + " selects nothing from " +
                                                    std::to_string(n_g) + " parameters");
            }
        }
    }
}

inline RunConfig parse_config(std::string_view text, const std::string& source = "<config>") {
    RunConfig config;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const auto line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = detail::trim(line.substr(0, eq));
        if (key.empty()) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": missing key");
        }
        if (const auto seen = config.key_lines.find(key); seen != config.key_lines.end()) {
            throw ConfigError(source + ":" + std::to_string(line_no) + ": " + std::string(key) +
                              ": duplicate key (first set on line " + std::to_string(seen->second) + ")");
        }
        apply_setting(config, key, line.substr(eq + 1), source, line_no);
        config.key_lines[std::string(key)] = line_no;
    }
    return config;
}

/// Canonical text for a config; parse_config(to_config_text(c)) reproduces c.
inline std::string to_config_text(const RunConfig& c) {
    std::ostringstream os;
    auto list = [&](const auto& xs, auto fmt) {
        os << '[';
        for (std::size_t i = 0; i < xs.size(); ++i) {
            os << (i ? ", " : "") << fmt(xs[i]);
        }
        os << "]\n";
    };
    auto num = [](double v) { return format_number(v); };
    auto cnt = [](std::size_t v) { return std::to_string(v); };
    os << "model = " << to_string(c.model.kind) << '\n';
    os << "tensor_sizes = ";
    list(c.model.quadratic.tensor_sizes, cnt);
    os << "block_scales = ";
    list(c.model.quadratic.block_scales, num);
    os << "noise = " << num(c.model.quadratic.noise) << '\n';
    os << "mlp_inputs = " << c.model.mlp.inputs << '\n';
    os << "mlp_hidden = " << c.model.mlp.hidden << '\n';
    os << "mlp_classes = " << c.model.mlp.classes << '\n';
    os << "mlp_activation = " << to_string(c.model.mlp.activation) << '\n';
    os << "mlp_dataset_size = " << c.model.mlp.dataset_size << '\n';
    os << "mlp_separation = " << num(c.model.mlp.separation) << '\n';
    os << "batch_size = " << c.model.mlp.batch_size << '\n';
    os << "workers = " << c.train.n_workers << '\n';
    os << "iterations = " << c.train.iterations << '\n';
    os << "learning_rate = " << num(c.train.learning_rate) << '\n';
    os << "lr_decay_at = ";
    list(c.train.lr_decay_at, cnt);
    os << "lr_decay_factor = " << num(c.train.lr_decay_factor) << '\n';
    os << "sparsifier = " << to_string(c.train.sparsifier.kind) << '\n';
    os << "density = " << num(c.train.sparsifier.density) << '\n';
    os << "threshold = " << num(c.train.sparsifier.threshold) << '\n';
    if (c.seed_set) {
        os << "seed = " << c.train.seed << '\n';
    }
    os << "mode = " << to_string(c.train.mode) << '\n';
    os << "strict_alg1 = " << (c.train.fill == ValueFill::strict_alg1 ? "true" : "false") << '\n';
    os << "eval_every = " << c.train.eval_every << '\n';
    os << "timings = " << (c.timings ? "true" : "false") << '\n';
    os << "alpha = " << num(c.alpha) << '\n';
    os << "beta = " << num(c.beta) << '\n';
    os << "out = \"" << c.out_dir << "\"\n";
    if (!c.sweep.workers.empty()) {
        os << "sweep_workers = ";
        list(c.sweep.workers, cnt);
    }
    if (!c.sweep.densities.empty()) {
        os << "sweep_densities = ";
        list(c.sweep.densities, num);
    }
    if (!c.sweep.sparsifiers.empty()) {
        os << "sweep_sparsifiers = ";
        list(c.sweep.sparsifiers, [](SparsifierKind k) { return std::string(to_string(k)); });
    }
    return os.str();
}

/// One config per point of sparsifiers x workers x densities, sweep axes cleared.
inline std::vector<RunConfig> expand_sweep(const RunConfig& c) {
    const auto kinds =
        c.sweep.sparsifiers.empty() ? std::vector<SparsifierKind>{c.train.sparsifier.kind} : c.sweep.sparsifiers;
    const auto workers = c.sweep.workers.empty() ? std::vector<std::size_t>{c.train.n_workers} : c.sweep.workers;
    const auto densities =
        c.sweep.densities.empty() ? std::vector<double>{c.train.sparsifier.density} : c.sweep.densities;
    std::vector<RunConfig> points;
    for (auto kind : kinds) {
        for (auto n : workers) {
            for (auto d : densities) {
                RunConfig p = c;
                p.sweep = {};
                p.train.sparsifier.kind = kind;
                p.train.n_workers = n;
                p.train.sparsifier.density = d;
                points.push_back(std::move(p));
            }
        }
    }
    return points;
}

/// `<sparsifier>_n<workers>_d<density>`
inline std::string artifact_stem(const RunConfig& c) {
    return std::string(to_string(c.train.sparsifier.kind)) + "_n" + std::to_string(c.train.n_workers) + "_d" +
           format_number(c.train.sparsifier.density);
}

}  // namespace deft
