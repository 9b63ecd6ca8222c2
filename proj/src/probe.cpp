#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>

#include "psd/eval.hpp"

namespace psd {

double ProbeObjective::loss_and_grad(const std::vector<double>& params,
                                     std::vector<double>& grad) const {
    const Index n = features.rows();
    const Index d = features.cols();
    const Index k = num_classes;
    require(params.size() == parameter_count(), ErrorCode::invalid_input,
            "probe: parameter vector has wrong length");
    grad.assign(params.size(), 0.0);

    std::vector<double> logits(k);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
        const auto x = features.row(i);
        for (Index c = 0; c < k; ++c) {
            double s = params[d * k + c];
            for (Index f = 0; f < d; ++f) {
                s += x[f] * params[f * k + c];
            }
            logits[c] = s;
        }
        const double peak = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double l : logits) {
            z += std::exp(l - peak);
        }
        const double log_z = peak + std::log(z);
        loss -= (logits[labels[i]] - log_z) * inv_n;
        for (Index c = 0; c < k; ++c) {
            const double coeff = (std::exp(logits[c] - log_z) - (c == labels[i] ? 1.0 : 0.0)) * inv_n;
            for (Index f = 0; f < d; ++f) {
                grad[f * k + c] += coeff * x[f];
            }
            grad[d * k + c] += coeff;
        }
    }
    for (Index w = 0; w < d * k; ++w) {
        loss += 0.5 * l2 * params[w] * params[w];
        grad[w] += l2 * params[w];
    }
    return loss;
}

std::vector<std::uint32_t> ProbeObjective::predict(const Matrix& x,
                                                   const std::vector<double>& params) const {
    const Index d = x.cols();
    const Index k = num_classes;
    std::vector<std::uint32_t> out(x.rows());
    for (Index i = 0; i < x.rows(); ++i) {
        double best = -std::numeric_limits<double>::infinity();
        for (Index c = 0; c < k; ++c) {
            double s = params[d * k + c];
            for (Index f = 0; f < d; ++f) {
                s += x(i, f) * params[f * k + c];
            }
            if (s > best) {
                best = s;
                out[i] = static_cast<std::uint32_t>(c);
            }
        }
    }
    return out;
}

namespace {

using Vec = std::vector<double>;

double vdot(const Vec& a, const Vec& b) {
    return dot(a, b);
}

Vec step_along(const Vec& x, double t, const Vec& d) {
    Vec out(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        out[i] = x[i] + t * d[i];
    }
    return out;
}

struct LinePoint {
    double t;
    double f;
    Vec x;
    Vec g;
};

// Strong-Wolfe line search (bracketing then zoom with safeguarded quadratic interpolation).
class WolfeSearch {
public:
    WolfeSearch(const ProbeObjective& obj, const Vec& x0, double f0, const Vec& dir, double slope0)
        : obj_(obj), x0_(x0), f0_(f0), dir_(dir), slope0_(slope0) {}

    std::optional<LinePoint> run(double t_init) {
        double t_prev = 0.0, f_prev = f0_, slope_prev = slope0_;
        double t = t_init;
        for (int i = 0; i < 25; ++i) {
            LinePoint p = eval(t);
            if (!std::isfinite(p.f) || p.f > f0_ + kC1 * t * slope0_ || (i > 0 && p.f >= f_prev)) {
                return zoom(t_prev, f_prev, slope_prev, t, p.f);
            }
            const double slope = vdot(p.g, dir_);
            if (std::abs(slope) <= -kC2 * slope0_) {
                return p;
            }
            if (slope >= 0.0) {
                return zoom(t, p.f, slope, t_prev, f_prev);
            }
            t_prev = t;
            f_prev = p.f;
            slope_prev = slope;
            t *= 2.0;
        }
        return std::nullopt;
    }

private:
    static constexpr double kC1 = 1e-4;
    static constexpr double kC2 = 0.9;

    LinePoint eval(double t) {
        LinePoint p{t, 0.0, step_along(x0_, t, dir_), {}};
        p.f = obj_.loss_and_grad(p.x, p.g);
        return p;
    }

    std::optional<LinePoint> zoom(double lo, double f_lo, double slope_lo, double hi, double f_hi) {
        for (int i = 0; i < 40; ++i) {
            const double width = hi - lo;
            if (std::abs(width) < 1e-16) {
                break;
            }
            // Minimizer of the quadratic through (lo, f_lo, slope_lo) and (hi, f_hi).
            double t = lo + 0.5 * width;
            const double denom = 2.0 * (f_hi - f_lo - slope_lo * width);
            if (std::isfinite(f_hi) && denom > 0.0) {
                const double cand = lo - slope_lo * width * width / denom;
                const double a = std::min(lo, hi) + 0.1 * std::abs(width);
                const double b = std::max(lo, hi) - 0.1 * std::abs(width);
                if (cand >= a && cand <= b) {
                    t = cand;
                }
            }
            LinePoint p = eval(t);
            if (!std::isfinite(p.f) || p.f > f0_ + kC1 * t * slope0_ || p.f >= f_lo) {
                hi = t;
                f_hi = p.f;
                continue;
            }
            const double slope = vdot(p.g, dir_);
            if (std::abs(slope) <= -kC2 * slope0_) {
                return p;
            }
            if (slope * (hi - lo) >= 0.0) {
                hi = lo;
                f_hi = f_lo;
            }
            lo = t;
            f_lo = p.f;
            slope_lo = slope;
        }
        return std::nullopt;
    }

    const ProbeObjective& obj_;
    const Vec& x0_;
    double f0_;
    const Vec& dir_;
    double slope0_;
};

// Armijo backtracking along -g, used when the Wolfe search fails.
std::optional<LinePoint> gradient_fallback(const ProbeObjective& obj, const Vec& x, double f,
                                           const Vec& g) {
    const double gg = vdot(g, g);
    Vec dir(g.size());
    for (Index i = 0; i < g.size(); ++i) {
        dir[i] = -g[i];
    }
    double t = 1.0;
    for (int i = 0; i < 60; ++i, t *= 0.5) {
        LinePoint p{t, 0.0, step_along(x, t, dir), {}};
        p.f = obj.loss_and_grad(p.x, p.g);
        if (std::isfinite(p.f) && p.f <= f - 1e-4 * t * gg && p.f < f) {
            return p;
        }
    }
    return std::nullopt;
}

double max_abs(const Vec& v) {
    double m = 0.0;
    for (double x : v) {
        m = std::max(m, std::abs(x));
    }
    return m;
}

double accuracy(const std::vector<std::uint32_t>& pred, const std::vector<std::uint32_t>& truth) {
    if (truth.empty()) {
        return 0.0;
    }
    Index hits = 0;
    for (Index i = 0; i < truth.size(); ++i) {
        hits += pred[i] == truth[i] ? 1 : 0;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(truth.size());
}

} // namespace

ProbeResult linear_probe(const Matrix& train_features, const std::vector<std::uint32_t>& train_labels,
                         const Matrix& test_features, const std::vector<std::uint32_t>& test_labels,
                         Index num_classes, const ProbeOptions& options) {
    require(num_classes >= 2, ErrorCode::invalid_input, "linear_probe: need >= 2 classes");
    require(train_features.rows() > 0 && train_labels.size() == train_features.rows(),
            ErrorCode::invalid_input, "linear_probe: one label per training row required");
    require(test_labels.size() == test_features.rows(), ErrorCode::invalid_input,
            "linear_probe: one label per test row required");
    require(test_features.rows() == 0 || test_features.cols() == train_features.cols(),
            ErrorCode::invalid_input, "linear_probe: train/test widths differ");
    for (const auto* labels : {&train_labels, &test_labels}) {
        for (auto y : *labels) {
            require(y < num_classes, ErrorCode::invalid_input, "linear_probe: label out of range");
        }
    }
    require(options.history >= 1, ErrorCode::invalid_input, "linear_probe: history must be >= 1");

    const ProbeObjective obj{train_features, train_labels, num_classes, options.l2};
    Vec x(obj.parameter_count(), 0.0);
    Vec g;
    double f = obj.loss_and_grad(x, g);

    ProbeResult result;
    result.initial_loss = f;

    std::deque<Vec> s_hist, y_hist;
    std::deque<double> rho_hist;
    for (Index iter = 0; iter < options.max_iters; ++iter) {
        if (max_abs(g) <= options.grad_tolerance) {
            break;
        }
        // Two-loop recursion: dir = -H g.
        Vec q = g;
        std::vector<double> alphas(s_hist.size());
        for (Index k = s_hist.size(); k-- > 0;) {
            alphas[k] = rho_hist[k] * vdot(s_hist[k], q);
            for (Index i = 0; i < q.size(); ++i) {
                q[i] -= alphas[k] * y_hist[k][i];
            }
        }
        double gamma = 1.0;
        if (!s_hist.empty()) {
            gamma = vdot(s_hist.back(), y_hist.back()) / vdot(y_hist.back(), y_hist.back());
        }
        for (double& v : q) {
            v *= gamma;
        }
        for (Index k = 0; k < s_hist.size(); ++k) {
            const double beta = rho_hist[k] * vdot(y_hist[k], q);
            for (Index i = 0; i < q.size(); ++i) {
                q[i] += (alphas[k] - beta) * s_hist[k][i];
            }
        }
        Vec dir(q.size());
        for (Index i = 0; i < q.size(); ++i) {
            dir[i] = -q[i];
        }

        double slope = vdot(g, dir);
        std::optional<LinePoint> next;
        if (slope < 0.0) {
            const double t0 = s_hist.empty() ? std::min(1.0, 1.0 / std::sqrt(vdot(g, g))) : 1.0;
            next = WolfeSearch(obj, x, f, dir, slope).run(t0);
        }
        if (!next) {
            ++result.fallback_steps;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            next = gradient_fallback(obj, x, f, g);
            if (!next) {
                break;
            }
        }

        Vec s(x.size()), y(x.size());
        for (Index i = 0; i < x.size(); ++i) {
            s[i] = next->x[i] - x[i];
            y[i] = next->g[i] - g[i];
        }
        const double sy = vdot(s, y);
        if (sy > 1e-12) {
            s_hist.push_back(std::move(s));
            y_hist.push_back(std::move(y));
            rho_hist.push_back(1.0 / sy);
            if (s_hist.size() > options.history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        const double previous = f;
        x = std::move(next->x);
        g = std::move(next->g);
        f = next->f;
        result.loss_history.push_back(f);
        result.iterations = iter + 1;
        if (previous - f <= 1e-15 * std::max(1.0, std::abs(f))) {
            break;
        }
    }

    result.final_loss = f;
    result.train_accuracy = accuracy(obj.predict(train_features, x), train_labels);
    result.test_accuracy =
        test_features.rows() == 0 ? 0.0 : accuracy(obj.predict(test_features, x), test_labels);
    return result;
}

} // namespace psd
