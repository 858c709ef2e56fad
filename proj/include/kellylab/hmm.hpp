#pragma once

// Multivariate Gaussian hidden Markov model trained by Viterbi (hard-EM) iterations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kellylab/error.hpp"
#include "kellylab/market.hpp"
#include "kellylab/parallel.hpp"
#include "kellylab/random.hpp"

namespace kellylab {

struct HmmFitConfig {
    int n_states = 2;
    int n_init = 10;
    int max_iter = 100;
    double tol = 1e-7;          ///< stop once the objective improves by less than this
    double mean_prior = 1e-4;   ///< pseudo-count shrinking each mean towards 0
    double covar_prior = 1e-4;  ///< added to the scatter matrix diagonal
    double min_covar = 1e-6;    ///< floor on covariance eigenvalues

    void validate() const {
        if (n_states < 1) throw ConfigError("hmm: n_states must be >= 1");
        if (n_init < 1) throw ConfigError("hmm: n_init must be >= 1");
        if (max_iter < 1) throw ConfigError("hmm: max_iter must be >= 1");
        if (!(tol > 0.0) || !(mean_prior > 0.0) || !(covar_prior > 0.0) || !(min_covar > 0.0))
            throw ConfigError("hmm: tol, mean_prior, covar_prior and min_covar must be > 0");
    }
};

struct GaussianHmmModel {
    std::vector<VectorXd> means;
    std::vector<MatrixXd> covariances;
    MatrixXd transition;
    VectorXd initial;

    int n_states() const noexcept { return static_cast<int>(means.size()); }
    Index n_features() const noexcept { return means.empty() ? 0 : means.front().size(); }

    void validate() const {
        const Index k = n_states();
        if (k < 1) throw ConfigError("hmm model: no states");
        if (static_cast<Index>(covariances.size()) != k) throw ConfigError("hmm model: one covariance per state required");
        for (Index s = 0; s < k; ++s) {
            const auto& c = covariances[static_cast<std::size_t>(s)];
            if (means[static_cast<std::size_t>(s)].size() != n_features() || c.rows() != n_features() ||
                c.cols() != n_features())
                throw ConfigError("hmm model: inconsistent feature dimension");
            if (!c.isApprox(c.transpose(), 1e-12) || c.llt().info() != Eigen::Success)
                throw ConfigError("hmm model: covariance " + std::to_string(s) + " is not symmetric positive definite");
        }
        if (transition.rows() != k || !detail::is_row_stochastic(transition, 1e-9))
            throw ConfigError("hmm model: transition must be row-stochastic");
        if (initial.size() != k || (initial.array() < 0.0).any() || std::abs(initial.sum() - 1.0) > 1e-9)
            throw ConfigError("hmm model: initial must be a probability vector");
    }
};

/// Per-period log returns of a price matrix (rows = time).
inline MatrixXd log_returns(const MatrixXd& prices) {
    if (prices.rows() < 2) return MatrixXd(0, prices.cols());
    return (prices.bottomRows(prices.rows() - 1).array() / prices.topRows(prices.rows() - 1).array()).log().matrix();
}

namespace detail {

/// Cached Gaussian log-density evaluator for one state.
class GaussianLogPdf {
public:
    GaussianLogPdf(const VectorXd& mean, const MatrixXd& cov) : mean_(mean), llt_(cov) {
        if (llt_.info() != Eigen::Success) throw NumericalError("hmm: covariance is not positive definite");
        const MatrixXd& l = llt_.matrixL();
        const double log_det = 2.0 * l.diagonal().array().log().sum();
        constant_ = -0.5 * (static_cast<double>(mean.size()) * std::log(2.0 * std::numbers::pi) + log_det);
    }

    double operator()(const Eigen::Ref<const VectorXd>& x) const {
        const VectorXd z = llt_.matrixL().solve(x - mean_);
        return constant_ - 0.5 * z.squaredNorm();
    }

private:
    VectorXd mean_;
    Eigen::LLT<MatrixXd> llt_;
    double constant_ = 0.0;
};

inline double safe_log(double p) { return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity(); }

/// T x K emission log-likelihoods.
inline MatrixXd emission_log_likelihood(const GaussianHmmModel& model, const MatrixXd& seq) {
    std::vector<GaussianLogPdf> pdfs;
    for (int s = 0; s < model.n_states(); ++s)
        pdfs.emplace_back(model.means[static_cast<std::size_t>(s)], model.covariances[static_cast<std::size_t>(s)]);
    MatrixXd out(seq.rows(), model.n_states());
    for (Index t = 0; t < seq.rows(); ++t)
        for (int s = 0; s < model.n_states(); ++s) out(t, s) = pdfs[static_cast<std::size_t>(s)](seq.row(t).transpose());
    return out;
}

} // namespace detail

struct ViterbiPath {
    std::vector<int> states;
    double log_prob = -std::numeric_limits<double>::infinity();  ///< log p(x, z*)
};

/// Most probable state path, computed in the log domain.
inline ViterbiPath viterbi(const GaussianHmmModel& model, const MatrixXd& seq) {
    const Index n = seq.rows();
    const int k = model.n_states();
    ViterbiPath out;
    if (n == 0) {
        out.log_prob = 0.0;
        return out;
    }
    const MatrixXd emit = detail::emission_log_likelihood(model, seq);
    MatrixXd log_a(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) log_a(i, j) = detail::safe_log(model.transition(i, j));

    Eigen::RowVectorXd score(k);
    for (int s = 0; s < k; ++s) score[s] = detail::safe_log(model.initial[s]) + emit(0, s);
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> back(n, k);
    Eigen::RowVectorXd next(k);
    for (Index t = 1; t < n; ++t) {
        for (int j = 0; j < k; ++j) {
            int arg = 0;
            double best = score[0] + log_a(0, j);
            for (int i = 1; i < k; ++i) {
                const double v = score[i] + log_a(i, j);
                if (v > best) {
                    best = v;
                    arg = i;
                }
            }
            back(t, j) = arg;
            next[j] = best + emit(t, j);
        }
        score = next;
    }
    int last = 0;
    for (int s = 1; s < k; ++s)
        if (score[s] > score[last]) last = s;
    out.log_prob = score[last];
    out.states.resize(static_cast<std::size_t>(n));
    out.states.back() = last;
    for (Index t = n - 1; t > 0; --t)
        out.states[static_cast<std::size_t>(t - 1)] = back(t, out.states[static_cast<std::size_t>(t)]);
    return out;
}

inline std::vector<int> decode(const GaussianHmmModel& model, const MatrixXd& seq) { return viterbi(model, seq).states; }

/// log p(x, z) for a given path.
inline double path_log_prob(const GaussianHmmModel& model, const MatrixXd& seq, const std::vector<int>& path) {
    const MatrixXd emit = detail::emission_log_likelihood(model, seq);
    double lp = detail::safe_log(model.initial[path[0]]) + emit(0, path[0]);
    for (Index t = 1; t < seq.rows(); ++t) {
        const auto i = path[static_cast<std::size_t>(t - 1)], j = path[static_cast<std::size_t>(t)];
        lp += detail::safe_log(model.transition(i, j)) + emit(t, j);
    }
    return lp;
}

/// Regime label at the end of a window of recent log returns.
inline int predict_current(const GaussianHmmModel& model, const MatrixXd& window) {
    if (window.rows() < 1) throw ConfigError("predict_current: window must contain at least one return");
    return viterbi(model, window).states.back();
}

struct HmmFit {
    GaussianHmmModel model;
    double objective = -std::numeric_limits<double>::infinity();
    std::vector<double> history;  ///< objective per iteration of the winning restart
    int restart = 0;
    int degenerate_restarts = 0;
};

namespace detail {

/// Log of the priors that the re-estimation step maximises jointly with the
/// Viterbi likelihood, so that the tracked objective is monotone.
inline double log_prior(const GaussianHmmModel& m, const HmmFitConfig& cfg) {
    double lp = 0.0;
    for (int s = 0; s < m.n_states(); ++s) {
        const auto& c = m.covariances[static_cast<std::size_t>(s)];
        const auto& mu = m.means[static_cast<std::size_t>(s)];
        const Eigen::LLT<MatrixXd> llt(c);
        const MatrixXd inv = llt.solve(MatrixXd::Identity(c.rows(), c.cols()));
        lp -= 0.5 * cfg.mean_prior * mu.dot(inv * mu) + 0.5 * cfg.covar_prior * inv.trace();
        lp += safe_log(m.initial[s]);
    }
    return lp;
}

inline MatrixXd floor_eigenvalues(const MatrixXd& c, double floor) {
    const MatrixXd sym = 0.5 * (c + c.transpose());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
    const VectorXd ev = es.eigenvalues().cwiseMax(floor);
    MatrixXd out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

struct RestartOutcome {
    std::optional<GaussianHmmModel> model;
    double objective = -std::numeric_limits<double>::infinity();
    std::vector<double> history;
};

inline GaussianHmmModel random_init(const MatrixXd& pooled, const HmmFitConfig& cfg,
                                    Rng& rng) {
    const int k = cfg.n_states;
    const Index d = pooled.cols();
    const VectorXd mean = pooled.colwise().mean().transpose();
    const MatrixXd centred = pooled.rowwise() - mean.transpose();
    const MatrixXd cov = centred.transpose() * centred / static_cast<double>(std::max<Index>(pooled.rows() - 1, 1));
    GaussianHmmModel m;
    for (int s = 0; s < k; ++s) {
        const auto row = static_cast<Index>(rng.uniform() * static_cast<double>(pooled.rows())) % pooled.rows();
        m.means.push_back(pooled.row(row).transpose());
        // random spread of scales lets restarts split by volatility as well as by mean
        const double scale = std::exp(2.0 * rng.uniform() - 1.0);
        m.covariances.push_back(floor_eigenvalues(cov * scale + cfg.min_covar * MatrixXd::Identity(d, d), cfg.min_covar));
    }
    m.transition.resize(k, k);
    for (int i = 0; i < k; ++i) {
        const double stay = k == 1 ? 1.0 : 0.5 + 0.49 * rng.uniform();
        m.transition.row(i).setConstant(k == 1 ? 0.0 : (1.0 - stay) / (k - 1));
        m.transition(i, i) = stay;
    }
    m.initial = VectorXd::Constant(k, 1.0 / k);
    return m;
}

/// One Viterbi-training run. Empty model when a state ends up with no observations.
inline RestartOutcome viterbi_training(const std::vector<MatrixXd>& seqs, GaussianHmmModel model,
                                       const HmmFitConfig& cfg) {
    const int k = cfg.n_states;
    const Index d = model.n_features();
    RestartOutcome out;
    double previous = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < cfg.max_iter; ++iter) {
        // E: hard assignment
        std::vector<std::vector<int>> paths;
        double objective = log_prior(model, cfg);
        for (const auto& s : seqs) {
            ViterbiPath p = viterbi(model, s);
            objective += p.log_prob;
            paths.push_back(std::move(p.states));
        }
        out.history.push_back(objective);
        out.objective = objective;
        out.model = model;
        if (iter > 0 && objective - previous < cfg.tol) break;
        previous = objective;

        // M: MAP re-estimation given the paths
        std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
        std::vector<VectorXd> sums(static_cast<std::size_t>(k), VectorXd::Zero(d));
        MatrixXd trans_counts = MatrixXd::Zero(k, k);
        VectorXd first_counts = VectorXd::Zero(k);
        for (std::size_t q = 0; q < seqs.size(); ++q) {
            const auto& path = paths[q];
            first_counts[path[0]] += 1.0;
            for (Index t = 0; t < seqs[q].rows(); ++t) {
                const auto s = static_cast<std::size_t>(path[static_cast<std::size_t>(t)]);
                counts[s] += 1.0;
                sums[s] += seqs[q].row(t).transpose();
                if (t > 0) trans_counts(path[static_cast<std::size_t>(t - 1)], static_cast<Index>(s)) += 1.0;
            }
        }
        if (std::any_of(counts.begin(), counts.end(), [](double c) { return c == 0.0; })) {
            out.model.reset();
            return out;
        }
        std::vector<MatrixXd> scatter(static_cast<std::size_t>(k), MatrixXd::Zero(d, d));
        for (int s = 0; s < k; ++s)
            model.means[static_cast<std::size_t>(s)] = sums[static_cast<std::size_t>(s)] / (counts[static_cast<std::size_t>(s)] + cfg.mean_prior);
        for (std::size_t q = 0; q < seqs.size(); ++q) {
            for (Index t = 0; t < seqs[q].rows(); ++t) {
                const auto s = static_cast<std::size_t>(paths[q][static_cast<std::size_t>(t)]);
                const VectorXd diff = seqs[q].row(t).transpose() - model.means[s];
                scatter[s].noalias() += diff * diff.transpose();
            }
        }
        for (int s = 0; s < k; ++s) {
            const auto su = static_cast<std::size_t>(s);
            const MatrixXd num = scatter[su] + cfg.mean_prior * model.means[su] * model.means[su].transpose() +
                                 cfg.covar_prior * MatrixXd::Identity(d, d);
            model.covariances[su] = floor_eigenvalues(num / counts[su], cfg.min_covar);
            const double row_total = trans_counts.row(s).sum();
            if (row_total > 0.0) model.transition.row(s) = trans_counts.row(s) / row_total;
        }
        model.initial = (first_counts.array() + 1.0) / (static_cast<double>(seqs.size()) + k);
    }
    return out;
}

} // namespace detail

/// Fit by Viterbi training with `n_init` random restarts; the restart with the
/// highest final objective (Viterbi log-likelihood plus log-priors) wins.
/// A restart in which a state loses all observations is re-drawn a few times
/// before it is counted as degenerate.
inline HmmFit fit_hmm(const std::vector<MatrixXd>& sequences, const HmmFitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (sequences.empty()) throw FitError("hmm fit: no sequences");
    const Index d = sequences.front().cols();
    Index total = 0;
    for (const auto& s : sequences) {
        if (s.cols() != d) throw FitError("hmm fit: sequences have different feature counts");
        if (s.rows() < 10 * cfg.n_states)
            throw FitError("hmm fit: each sequence needs at least " + std::to_string(10 * cfg.n_states) + " rows");
        if (!s.allFinite()) throw FitError("hmm fit: non-finite observation");
        total += s.rows();
    }
    MatrixXd pooled(total, d);
    Index r = 0;
    for (const auto& s : sequences) {
        pooled.middleRows(r, s.rows()) = s;
        r += s.rows();
    }

    constexpr int kRedraws = 10;
    std::vector<detail::RestartOutcome> outcomes(static_cast<std::size_t>(cfg.n_init));
    std::vector<int> degenerate(static_cast<std::size_t>(cfg.n_init), 0);
    parallel_for(outcomes.size(), [&](std::size_t i) {
        for (int attempt = 0; attempt < kRedraws; ++attempt) {
            Rng rng = Rng::stream(seed, i * kRedraws + static_cast<std::size_t>(attempt));
            auto o = detail::viterbi_training(sequences, detail::random_init(pooled, cfg, rng), cfg);
            if (o.model) {
                outcomes[i] = std::move(o);
                return;
            }
        }
        degenerate[i] = 1;
    });

    HmmFit fit;
    fit.degenerate_restarts = std::accumulate(degenerate.begin(), degenerate.end(), 0);
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        if (!outcomes[i].model) continue;
        if (outcomes[i].objective > fit.objective) {
            fit.model = *outcomes[i].model;
            fit.objective = outcomes[i].objective;
            fit.history = outcomes[i].history;
            fit.restart = static_cast<int>(i);
        }
    }
    if (fit.model.n_states() == 0) throw FitError("hmm fit: every restart was degenerate");
    return fit;
}

inline GaussianHmmModel fit(const std::vector<MatrixXd>& sequences, const HmmFitConfig& cfg, std::uint64_t seed) {
    return fit_hmm(sequences, cfg, seed).model;
}

/// perm[state] = regime whose per-period log drift is nearest to the state mean.
inline std::vector<int> align_labels(const GaussianHmmModel& model, const std::vector<MarketParams>& regimes, double dt) {
    if (static_cast<int>(regimes.size()) != model.n_states())
        throw FitError("align_labels: model has " + std::to_string(model.n_states()) + " states but there are " +
                       std::to_string(regimes.size()) + " regimes");
    std::vector<int> perm(static_cast<std::size_t>(model.n_states()));
    for (int s = 0; s < model.n_states(); ++s) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < regimes.size(); ++k) {
            const double dist = (model.means[static_cast<std::size_t>(s)] - regimes[k].log_drift(dt)).squaredNorm();
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<int>(k);
            }
        }
        perm[static_cast<std::size_t>(s)] = best;
    }
    std::vector<int> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw FitError("align_labels: nearest-neighbour matching is not a bijection");
    return perm;
}

/// Apply a state -> regime map to a label sequence.
inline std::vector<int> relabel(const std::vector<int>& labels, const std::vector<int>& perm) {
    std::vector<int> out(labels.size());
    std::transform(labels.begin(), labels.end(), out.begin(),
                   [&](int l) { return perm.at(static_cast<std::size_t>(l)); });
    return out;
}

/// Fraction of matching labels, maximised over relabellings of `predicted`.
inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    if (predicted.size() != truth.size()) throw ConfigError("accuracy: sequences differ in length");
    if (predicted.empty()) return 1.0;
    int k = 0;
    for (int l : predicted) k = std::max(k, l + 1);
    for (int l : truth) k = std::max(k, l + 1);
    if (k > 8) throw ConfigError("accuracy: too many labels for exhaustive alignment");
    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::size_t best = 0;
    do {
        std::size_t hits = 0;
        for (std::size_t t = 0; t < truth.size(); ++t)
            if (perm[static_cast<std::size_t>(predicted[t])] == truth[t]) ++hits;
        best = std::max(best, hits);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(best) / static_cast<double>(truth.size());
}

// ---------------------------------------------------------------------------
// Plain-text model file
//
//   kellylab-gaussian-hmm 1
//   states K
//   features D
//   initial p_1 ... p_K
//   transition            (K rows follow)
//   mean k                (one row of D values)
//   covariance k          (D rows of D values)

inline void save_hmm(std::ostream& os, const GaussianHmmModel& m) {
    const auto prec = os.precision(17);
    const int k = m.n_states();
    const Index d = m.n_features();
    os << "kellylab-gaussian-hmm 1\nstates " << k << "\nfeatures " << d << "\ninitial";
    for (int s = 0; s < k; ++s) os << ' ' << m.initial[s];
    os << "\ntransition\n";
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) os << (j ? " " : "") << m.transition(i, j);
        os << '\n';
    }
    for (int s = 0; s < k; ++s) {
        const auto su = static_cast<std::size_t>(s);
        os << "mean " << s << '\n';
        for (Index j = 0; j < d; ++j) os << (j ? " " : "") << m.means[su][j];
        os << "\ncovariance " << s << '\n';
        for (Index i = 0; i < d; ++i) {
            for (Index j = 0; j < d; ++j) os << (j ? " " : "") << m.covariances[su](i, j);
            os << '\n';
        }
    }
    os.precision(prec);
}

inline GaussianHmmModel load_hmm(std::istream& is) {
    auto expect = [&](const std::string& word) {
        std::string w;
        if (!(is >> w) || w != word) throw ConfigError("hmm file: expected '" + word + "', found '" + w + "'");
    };
    auto number = [&]() {
        std::string tok;
        if (!(is >> tok)) throw ConfigError("hmm file: unexpected end of file");
        try {
            std::size_t used = 0;
            const double v = std::stod(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("hmm file: bad number '" + tok + "'");
        }
    };
    expect("kellylab-gaussian-hmm");
    if (number() != 1.0) throw ConfigError("hmm file: unsupported version");
    expect("states");
    const int k = static_cast<int>(number());
    expect("features");
    const auto d = static_cast<Index>(number());
    if (k < 1 || d < 1) throw ConfigError("hmm file: bad dimensions");
    GaussianHmmModel m;
    expect("initial");
    m.initial.resize(k);
    for (int s = 0; s < k; ++s) m.initial[s] = number();
    expect("transition");
    m.transition.resize(k, k);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j) m.transition(i, j) = number();
    for (int s = 0; s < k; ++s) {
        expect("mean");
        if (number() != s) throw ConfigError("hmm file: states out of order");
        VectorXd mu(d);
        for (Index j = 0; j < d; ++j) mu[j] = number();
        expect("covariance");
        if (number() != s) throw ConfigError("hmm file: states out of order");
        MatrixXd c(d, d);
        for (Index i = 0; i < d; ++i)
            for (Index j = 0; j < d; ++j) c(i, j) = number();
        m.means.push_back(std::move(mu));
        m.covariances.push_back(std::move(c));
    }
    m.validate();
    return m;
}

} // namespace kellylab
