#include <algorithm>
#include <cmath>
#include <functional>
#include <cstdio>
#include <sstream>

#include "psd/experiment.hpp"

namespace psd {

double gradient_relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

namespace {

// Checks every coordinate of `x` against a central difference of `f`.
// Returns the worst relative error and adds to `coordinates`.
double check_coordinates(std::vector<double>& x, const std::vector<double>& analytic,
                         const std::function<double()>& f, Index& coordinates) {
    double worst = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + kFiniteDifferenceStep;
        const double up = f();
        x[i] = saved - kFiniteDifferenceStep;
        const double down = f();
        x[i] = saved;
        const double numeric = (up - down) / (2.0 * kFiniteDifferenceStep);
        worst = std::max(worst, gradient_relative_error(analytic[i], numeric, kRelativeErrorFloor));
        ++coordinates;
    }
    return worst;
}

Matrix random_unit_rows(Index n, Index d, Rng& rng) {
    return normalize_rows_l2(gaussian_matrix(n, d, 0.0, 1.0, rng));
}

struct LossInstance {
    Matrix image;
    Matrix text;
    double log_scale;
};

LossInstance random_loss_instance(Rng& rng) {
    const Index n = 2 + rng.below(7);  // 2..8
    const Index d = 2 + rng.below(7);
    return {random_unit_rows(n, d, rng), random_unit_rows(n, d, rng), std::log(rng.uniform(1.0, 20.0))};
}

// Gradients of a loss over (image, text, log_scale).
double check_loss(LossInstance& inst, const std::function<LossGrad(const LossInstance&)>& fn,
                  Index& coordinates) {
    const LossGrad g = fn(inst);
    auto value = [&] { return fn(inst).loss; };
    double worst = check_coordinates(inst.image.data(), g.d_image.data(), value, coordinates);
    worst = std::max(worst, check_coordinates(inst.text.data(), g.d_text.data(), value, coordinates));
    std::vector<double> s{inst.log_scale};
    worst = std::max(worst, check_coordinates(
                                s, {g.d_log_scale},
                                [&] {
                                    const double saved = inst.log_scale;
                                    inst.log_scale = s[0];
                                    const double v = fn(inst).loss;
                                    inst.log_scale = saved;
                                    return v;
                                },
                                coordinates));
    return worst;
}

GradcheckRow info_nce_row(std::uint64_t seed, Index trials) {
    GradcheckRow row{"info_nce", trials};
    for (Index t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        LossInstance inst = random_loss_instance(rng);
        auto fn = [](const LossInstance& x) { return info_nce_unchecked(x.image, x.text, x.log_scale); };
        row.worst_error = std::max(row.worst_error, check_loss(inst, fn, row.coordinates));
    }
    row.passed = row.worst_error < row.tolerance;
    return row;
}

// Targets depend on the teacher embeddings only, which are frozen copies of the instance.
struct PsdSetup {
    PartitionPlan plan;
    SoftTargets targets;
};

PsdSetup psd_setup(TargetMode mode, const LossInstance& teacher, Rng& rng) {
    const Index n = teacher.image.rows();
    const double alpha = rng.uniform();
    PartitionPlan plan = make_partition(n, alpha, rng);
    const double teacher_scale = rng.uniform(1.0, 50.0);
    SoftTargets targets = make_soft_targets(mode, teacher.image, teacher.text, teacher_scale, plan);
    return {std::move(plan), std::move(targets)};
}

GradcheckRow psd_row(const std::string& name, TargetMode mode, std::uint64_t seed, Index trials) {
    GradcheckRow row{name, trials};
    for (Index t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        LossInstance inst = random_loss_instance(rng);
        const PsdSetup setup = psd_setup(mode, inst, rng);
        auto fn = [&](const LossInstance& x) {
            return psd_loss_unchecked(x.image, x.text, x.log_scale, setup.plan, setup.targets,
                                      setup.plan.alpha);
        };
        row.worst_error = std::max(row.worst_error, check_loss(inst, fn, row.coordinates));
    }
    row.passed = row.worst_error < row.tolerance;
    return row;
}

bool near_kink(const ForwardCache& cache, Activation act) {
    if (act != Activation::relu) {
        return false;
    }
    for (const auto& pre : cache.pre_activations) {
        for (double v : pre.data()) {
            if (std::abs(v) < 1e-3) {
                return true;
            }
        }
    }
    return false;
}

GradcheckRow encoder_row(const std::string& name, std::vector<Index> hidden, Activation act,
                         std::uint64_t seed, Index trials) {
    GradcheckRow row{name, trials};
    for (Index t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const Index n = 1 + rng.below(8);
        EncoderSpec spec{2 + rng.below(7), hidden, 2 + rng.below(7), act};
        for (auto& h : spec.hidden_dims) {
            h = 2 + rng.below(7);
        }
        ParamSet params;
        Matrix x;
        Encoded enc;
        // relu: redraw until no pre-activation sits within reach of a kink.
        for (;;) {
            params = init_params(spec, rng);
            for (auto& layer : params.layers) {
                for (auto& b : layer.bias) {
                    b = rng.gaussian(0.0, 0.1);
                }
            }
            x = gaussian_matrix(n, spec.input_dim, 0.0, 1.0, rng);
            enc = encode(params, x);
            if (!near_kink(enc.cache, act)) {
                break;
            }
        }
        const Matrix d_embedding = gaussian_matrix(n, spec.embed_dim, 0.0, 1.0, rng);
        const EncoderGrad g = encode_backward(params, enc.cache, d_embedding);

        std::vector<double> flat = params.flatten();
        const std::vector<double> d_flat = g.d_params.flatten();
        ParamSet probe = params;
        auto by_params = [&] {
            probe.assign(flat);
            return frobenius_dot(d_embedding, encode(probe, x).embedding);
        };
        row.worst_error = std::max(row.worst_error, check_coordinates(flat, d_flat, by_params, row.coordinates));
        auto by_input = [&] { return frobenius_dot(d_embedding, encode(params, x).embedding); };
        row.worst_error = std::max(row.worst_error,
                                   check_coordinates(x.data(), g.d_input.data(), by_input, row.coordinates));
    }
    row.passed = row.worst_error < row.tolerance;
    return row;
}

// Full chain: both encoders feeding the swapped objective.
GradcheckRow chain_row(std::uint64_t seed, Index trials) {
    GradcheckRow row{"psd_loss through encoders", trials};
    for (Index t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const Index n = 2 + rng.below(7);
        const Index embed = 2 + rng.below(7);
        const EncoderSpec is{2 + rng.below(7), {2 + rng.below(7)}, embed, Activation::tanh};
        const EncoderSpec ts{2 + rng.below(7), {2 + rng.below(7)}, embed, Activation::tanh};
        ParamSet ip = init_params(is, rng);
        ParamSet tp = init_params(ts, rng);
        const Matrix xi = gaussian_matrix(n, is.input_dim, 0.0, 1.0, rng);
        const Matrix xt = gaussian_matrix(n, ts.input_dim, 0.0, 1.0, rng);
        const double log_scale = std::log(rng.uniform(1.0, 20.0));

        const Encoded ei = encode(ip, xi);
        const Encoded et = encode(tp, xt);
        const LossInstance teacher{ei.embedding, et.embedding, log_scale};
        const PsdSetup setup = psd_setup(TargetMode::swapped, teacher, rng);
        auto loss_of = [&](const ParamSet& a, const ParamSet& b) {
            return psd_loss_unchecked(encode(a, xi).embedding, encode(b, xt).embedding, log_scale,
                                      setup.plan, setup.targets, setup.plan.alpha);
        };
        const LossGrad lg = loss_of(ip, tp);
        const std::vector<double> gi = encode_backward(ip, ei.cache, lg.d_image).d_params.flatten();
        const std::vector<double> gt = encode_backward(tp, et.cache, lg.d_text).d_params.flatten();

        std::vector<double> fi = ip.flatten();
        std::vector<double> ft = tp.flatten();
        ParamSet pi = ip, pt = tp;
        auto value = [&] {
            pi.assign(fi);
            pt.assign(ft);
            return loss_of(pi, pt).loss;
        };
        row.worst_error = std::max(row.worst_error, check_coordinates(fi, gi, value, row.coordinates));
        row.worst_error = std::max(row.worst_error, check_coordinates(ft, gt, value, row.coordinates));
    }
    row.passed = row.worst_error < row.tolerance;
    return row;
}

GradcheckRow probe_row(std::uint64_t seed, Index trials) {
    GradcheckRow row{"probe loss", trials};
    for (Index t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const Index n = 2 + rng.below(7);
        const Index d = 1 + rng.below(8);
        const Index k = 2 + rng.below(4);
        const Matrix x = gaussian_matrix(n, d, 0.0, 1.0, rng);
        std::vector<std::uint32_t> y(n);
        for (auto& label : y) {
            label = static_cast<std::uint32_t>(rng.below(k));
        }
        const ProbeObjective obj{x, y, k, rng.uniform(1e-4, 1e-1)};
        std::vector<double> params(obj.parameter_count());
        for (auto& p : params) {
            p = rng.gaussian();
        }
        std::vector<double> grad, scratch;
        obj.loss_and_grad(params, grad);
        auto value = [&] { return obj.loss_and_grad(params, scratch); };
        row.worst_error = std::max(row.worst_error, check_coordinates(params, grad, value, row.coordinates));
    }
    row.passed = row.worst_error < row.tolerance;
    return row;
}

// alpha = 1 with an all-aligned plan must reproduce InfoNCE exactly (up to rounding).
GradcheckRow equivalence_row(std::uint64_t seed, Index trials) {
    GradcheckRow row{"alpha=1 equals info_nce", trials};
    row.tolerance = 1e-12;
    for (Index t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const LossInstance inst = random_loss_instance(rng);
        const Index n = inst.image.rows();
        const LossGrad a = info_nce_unchecked(inst.image, inst.text, inst.log_scale);
        const LossGrad b = psd_loss_unchecked(inst.image, inst.text, inst.log_scale,
                                              PartitionPlan::all_aligned(n), SoftTargets{}, 1.0);
        double worst = std::abs(a.loss - b.loss) / std::max(1.0, std::abs(a.loss));
        worst = std::max(worst, std::abs(a.d_log_scale - b.d_log_scale));
        for (Index i = 0; i < a.d_image.size(); ++i) {
            worst = std::max(worst, std::abs(a.d_image.data()[i] - b.d_image.data()[i]));
            worst = std::max(worst, std::abs(a.d_text.data()[i] - b.d_text.data()[i]));
        }
        row.coordinates += 2 * a.d_image.size() + 2;
        row.worst_error = std::max(row.worst_error, worst);
    }
    row.passed = row.worst_error < row.tolerance;
    return row;
}

} // namespace

bool GradcheckReport::all_passed() const noexcept {
    return std::all_of(rows.begin(), rows.end(), [](const GradcheckRow& r) { return r.passed; });
}

Json GradcheckReport::to_json() const {
    Json out = Json::array();
    for (const auto& r : rows) {
        out.push_back(Json{{"name", r.name},
                           {"trials", r.trials},
                           {"coordinates", r.coordinates},
                           {"worst_error", r.worst_error},
                           {"tolerance", r.tolerance},
                           {"passed", r.passed}});
    }
    return Json{{"step", kFiniteDifferenceStep}, {"rows", out}, {"passed", all_passed()}};
}

std::string GradcheckReport::table() const {
    std::ostringstream out;
    out << "op                           trials  coords     worst       tol  result\n";
    for (const auto& r : rows) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-28s %6zu %7zu %9.2e %9.1e  %s\n", r.name.c_str(), r.trials,
                      r.coordinates, r.worst_error, r.tolerance, r.passed ? "PASS" : "FAIL");
        out << line;
    }
    return out.str();
}

GradcheckReport run_gradcheck(std::uint64_t seed, Index trials) {
    require(trials >= 1, ErrorCode::config, "gradcheck needs at least one trial");
    GradcheckReport report;
    report.rows.push_back(info_nce_row(derive_seed(seed, 1), trials));
    report.rows.push_back(psd_row("psd_loss swapped", TargetMode::swapped, derive_seed(seed, 2), trials));
    report.rows.push_back(psd_row("psd_loss bootstrap", TargetMode::bootstrap, derive_seed(seed, 3), trials));
    report.rows.push_back(encoder_row("encoder linear tanh", {}, Activation::tanh, derive_seed(seed, 4), trials));
    report.rows.push_back(encoder_row("encoder linear relu", {}, Activation::relu, derive_seed(seed, 5), trials));
    report.rows.push_back(encoder_row("encoder 2-hidden tanh", {0, 0}, Activation::tanh, derive_seed(seed, 6), trials));
    report.rows.push_back(encoder_row("encoder 2-hidden relu", {0, 0}, Activation::relu, derive_seed(seed, 7), trials));
    report.rows.push_back(chain_row(derive_seed(seed, 8), trials));
    report.rows.push_back(probe_row(derive_seed(seed, 9), trials));
    report.rows.push_back(equivalence_row(derive_seed(seed, 10), trials));
    return report;
}

} // namespace psd
