#include "rbt/random_batch.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rbt {

Philox4x32::Counter Philox4x32::block(Counter c, Key k) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int r = 0; r < 10; ++r) {
        std::uint64_t p0 = std::uint64_t(M0) * c[0];
        std::uint64_t p1 = std::uint64_t(M1) * c[2];
        std::uint32_t hi0 = std::uint32_t(p0 >> 32), lo0 = std::uint32_t(p0);
        std::uint32_t hi1 = std::uint32_t(p1 >> 32), lo1 = std::uint32_t(p1);
        c = {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
        k[0] += W0;
        k[1] += W1;
    }
    return c;
}

PhiloxStream::PhiloxStream(std::uint64_t seed, std::uint32_t c1, std::uint32_t c2, std::uint32_t c3)
    : key_{std::uint32_t(seed), std::uint32_t(seed >> 32)}, ctr_{0, c1, c2, c3} {}

std::uint32_t PhiloxStream::next() {
    if (used_ == 4) {
        buf_ = Philox4x32::block(ctr_, key_);
        ++ctr_[0];
        used_ = 0;
    }
    return buf_[used_++];
}

std::uint32_t PhiloxStream::below(std::uint32_t n) {
    // Lemire's multiply-shift with rejection
    std::uint64_t m = std::uint64_t(next()) * n;
    std::uint32_t l = std::uint32_t(m);
    if (l < n) {
        std::uint32_t t = std::uint32_t(-n) % n;
        while (l < t) {
            m = std::uint64_t(next()) * n;
            l = std::uint32_t(m);
        }
    }
    return std::uint32_t(m >> 32);
}

double PhiloxStream::uniform() {
    std::uint64_t hi = next() >> 5, lo = next() >> 6;
    return (double(hi) * 67108864.0 + double(lo)) / 9007199254740992.0;
}

Strategy strategy_from_name(const std::string& s) {
    if (s == "per-time-step" || s == "1") return Strategy::per_time_step;
    if (s == "per-iteration" || s == "2") return Strategy::per_iteration;
    throw BatchError("unknown batch strategy '" + s + "'");
}

std::string strategy_name(Strategy s) {
    return s == Strategy::per_time_step ? "per-time-step" : "per-iteration";
}

void BatchPlan::validate() const {
    if (N < 1) throw BatchError("batch plan: N must be positive");
    if (p < 1) throw BatchError("batch plan: p must be positive");
    if (p > N) throw BatchError("batch plan: p exceeds N");
}

Batch draw(const BatchPlan& plan, int m, int k, Role role) {
    plan.validate();
    if (m < 0 || k < 0) throw BatchError("draw: negative iteration or step");
    Batch b;
    b.m = m;
    b.k = plan.strategy == Strategy::per_iteration ? 0 : k;
    b.role = role;
    b.seed = plan.seed;
    if (plan.full()) {
        b.indices.resize(plan.N);
        std::iota(b.indices.begin(), b.indices.end(), 0);
        return b;
    }
    // the per-iteration strategy uses a reserved step word so that its
    // stream never coincides with a per-time-step one
    std::uint32_t kword = plan.strategy == Strategy::per_iteration ? 0xFFFFFFFFu : std::uint32_t(k);
    PhiloxStream rng(plan.seed, std::uint32_t(m), kword, (plan.lane << 1) | std::uint32_t(role));
    std::vector<int> pool(plan.N);
    std::iota(pool.begin(), pool.end(), 0);
    for (int i = 0; i < plan.p; ++i) {
        int j = i + int(rng.below(std::uint32_t(plan.N - i)));
        std::swap(pool[i], pool[j]);
    }
    b.indices.assign(pool.begin(), pool.begin() + plan.p);
    std::sort(b.indices.begin(), b.indices.end());
    return b;
}

ScalarField chi(const ScalarField& K_rb, const ScalarField& K_full) {
    if (K_rb.grid != K_full.grid || K_rb.size() != K_full.size())
        throw BatchError("chi: grid mismatch");
    ScalarField out(K_rb.grid, K_rb.units);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = K_rb[i] - K_full[i];
    return out;
}

double binomial(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    k = std::min(k, n - k);
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return std::round(r);
}

std::vector<std::vector<int>> enumerate_batches(int N, int p) {
    if (N < 1 || p < 1 || p > N) throw BatchError("enumerate_batches: need 1 <= p <= N");
    if (binomial(N, p) > 1e6) throw BatchError("enumerate_batches: more than 1e6 subsets");
    std::vector<std::vector<int>> out;
    std::vector<int> cur(p);
    std::iota(cur.begin(), cur.end(), 0);
    while (true) {
        out.push_back(cur);
        int i = p - 1;
        while (i >= 0 && cur[i] == N - p + i) --i;
        if (i < 0) break;
        ++cur[i];
        for (int j = i + 1; j < p; ++j) cur[j] = cur[j - 1] + 1;
    }
    return out;
}

namespace {

void check_pair(const BeamSamples& f, const BeamSamples& a) {
    if (f.K != a.K || f.N != a.N || f.n_points != a.n_points)
        throw BatchError("beam samples: forward and adjoint shapes differ");
    if (f.v.size() != std::size_t(f.K) * f.N * f.n_points) throw BatchError("beam samples: bad size");
}

// mean over beams and unbiased spread sum_j (g_j - mean)^2 / (N - 1)
void moments(const BeamSamples& s, int k, int x, double& mean, double& spread) {
    double m = 0.0;
    for (int j = 0; j < s.N; ++j) m += s.at(k, j, x);
    m /= s.N;
    double q = 0.0;
    for (int j = 0; j < s.N; ++j) {
        double d = s.at(k, j, x) - m;
        q += d * d;
    }
    mean = m;
    spread = q / (s.N - 1);
}

}  // namespace

std::vector<double> lambda_stat(const BeamSamples& fwd, const BeamSamples& adj, int p, double tau) {
    check_pair(fwd, adj);
    if (fwd.N < 2) throw BatchError("lambda_stat: need N >= 2");
    if (p < 1 || p > fwd.N) throw BatchError("lambda_stat: need 1 <= p <= N");
    const double f = 1.0 / p - 1.0 / fwd.N;
    std::vector<double> lam(fwd.n_points, 0.0);
    for (int x = 0; x < fwd.n_points; ++x) {
        double s = 0.0;
        for (int k = 0; k < fwd.K; ++k) {
            double mu, sf, mua, sa;
            moments(fwd, k, x, mu, sf);
            moments(adj, k, x, mua, sa);
            // E(u+_k)^2 from the spread identity
            double e_adj2 = mua * mua + f * sa;
            s += sf * e_adj2 + mu * mu * sa;
        }
        lam[x] = tau * s;
    }
    return lam;
}

std::vector<double> predicted_chi_variance(const BeamSamples& fwd, const BeamSamples& adj, int p,
                                           double tau) {
    auto lam = lambda_stat(fwd, adj, p, tau);
    const double f = 1.0 / p - 1.0 / fwd.N;
    for (double& v : lam) v *= f * tau;
    return lam;
}

std::vector<double> kernel_from_samples(const BeamSamples& fwd, const BeamSamples& adj, double tau,
                                        std::span<const std::vector<int>> fb,
                                        std::span<const std::vector<int>> ab) {
    check_pair(fwd, adj);
    if ((!fb.empty() && int(fb.size()) != fwd.K) || (!ab.empty() && int(ab.size()) != fwd.K))
        throw BatchError("kernel_from_samples: one batch per step required");
    std::vector<double> K(fwd.n_points, 0.0);
    std::vector<int> all(fwd.N);
    std::iota(all.begin(), all.end(), 0);
    for (int k = 0; k < fwd.K; ++k) {
        const auto& bf = fb.empty() ? all : fb[k];
        const auto& ba = ab.empty() ? all : ab[k];
        for (int x = 0; x < fwd.n_points; ++x) {
            double u = 0.0, ua = 0.0;
            for (int j : bf) u += fwd.at(k, j, x);
            for (int j : ba) ua += adj.at(k, j, x);
            K[x] += tau * (ua / ba.size()) * (u / bf.size());
        }
    }
    return K;
}

ChiMoments exact_chi_moments(const BeamSamples& fwd, const BeamSamples& adj, int p, double tau) {
    check_pair(fwd, adj);
    auto subsets = enumerate_batches(fwd.N, p);
    const int S = int(subsets.size());
    const int P = fwd.n_points;
    const double pairs = double(S) * S;
    double total = std::pow(pairs, fwd.K);
    if (total > 2e8) throw BatchError("exact_chi_moments: joint space too large");
    // per step and per (forward, adjoint) batch pair: tau * mean_adj * mean_fwd - tau u+_k u_k
    std::vector<double> full = kernel_from_samples(fwd, adj, tau);
    std::vector<std::vector<double>> term(fwd.K, std::vector<double>(std::size_t(S) * S * P));
    for (int k = 0; k < fwd.K; ++k) {
        std::vector<double> mf(std::size_t(S) * P), ma(std::size_t(S) * P);
        for (int s = 0; s < S; ++s)
            for (int x = 0; x < P; ++x) {
                double a = 0.0, b = 0.0;
                for (int j : subsets[s]) {
                    a += fwd.at(k, j, x);
                    b += adj.at(k, j, x);
                }
                mf[std::size_t(s) * P + x] = a / p;
                ma[std::size_t(s) * P + x] = b / p;
            }
        for (int s = 0; s < S; ++s)
            for (int t = 0; t < S; ++t)
                for (int x = 0; x < P; ++x)
                    term[k][(std::size_t(s) * S + t) * P + x] =
                        tau * ma[std::size_t(t) * P + x] * mf[std::size_t(s) * P + x];
    }
    ChiMoments out;
    out.mean.assign(P, 0.0);
    out.second.assign(P, 0.0);
    out.combinations = total;
    // odometer over the joint index (pair_1, ..., pair_K)
    const std::size_t npair = std::size_t(S) * S;
    std::vector<std::size_t> idx(fwd.K, 0);
    std::vector<double> acc(std::size_t(fwd.K + 1) * P, 0.0);  // prefix sums
    auto rebuild = [&](int from) {
        for (int k = from; k < fwd.K; ++k)
            for (int x = 0; x < P; ++x)
                acc[std::size_t(k + 1) * P + x] = acc[std::size_t(k) * P + x] + term[k][idx[k] * P + x];
    };
    rebuild(0);
    while (true) {
        const double* last = &acc[std::size_t(fwd.K) * P];
        for (int x = 0; x < P; ++x) {
            double c = last[x] - full[x];
            out.mean[x] += c;
            out.second[x] += c * c;
        }
        int k = fwd.K - 1;
        while (k >= 0 && ++idx[k] == npair) idx[k--] = 0;
        if (k < 0) break;
        rebuild(k);
    }
    for (int x = 0; x < P; ++x) {
        out.mean[x] /= total;
        out.second[x] /= total;
    }
    return out;
}

}  // namespace rbt
