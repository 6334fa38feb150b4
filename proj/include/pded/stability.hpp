// Parameter-free model selection over the top candidates: bootstrap
// subsets vote for the candidate with the lowest data-fitness ×
// coefficient-stability product, and the majority wins.
#pragma once

#include "pded/term_eval.hpp"

namespace pded {

// Coefficient of variation σ/|μ| (sample std, ddof 1). Sign-flipping
// subsample coefficients drive |μ| toward zero, which reads as infinite
// instability.
inline double term_cv(const Vec& samples) {
  const Eigen::Index n = samples.size();
  require(n >= 2, Errc::ConfigError, "cv needs at least two samples");
  const double mu = samples.mean();
  const double sd =
      std::sqrt((samples.array() - mu).square().sum() / double(n - 1));
  if (std::abs(mu) < 1e-12) return std::numeric_limits<double>::infinity();
  return sd / std::abs(mu);
}

struct SelectionConfig {
  int n_s = 100;  // bootstrap subsets (each casts one vote)
  int n_p = 10;   // coefficient subsamples per subset
};

struct SelectionReport {
  std::vector<PdeCandidate> candidates;  // index order = original ranking
  Mat scores;                            // K×N_s, MSE·CV per subset
  std::vector<int> votes;                // per candidate, sums to N_s
  int winner = 0;
};

namespace detail {

inline Mat gather_rows(const Mat& m, const std::vector<int>& rows) {
  Mat out(Eigen::Index(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(Eigen::Index(i)) = m.row(rows[i]);
  return out;
}

inline Vec gather(const Vec& v, const std::vector<int>& rows) {
  Vec out(Eigen::Index(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    out(Eigen::Index(i)) = v(rows[i]);
  return out;
}

}  // namespace detail

// Per-candidate per-subset scores MSE_i·CV_i. Each subset A_i is half the
// points drawn without replacement; each of the N_p coefficient subsamples
// is a quarter of the points drawn without replacement from A_i
// (independently per subsample, overlap across subsamples allowed).
// Singular or non-finite fits score +∞ for that subset.
inline Mat stability_scores(const std::vector<Mat>& thetas, const Vec& ut,
                            const SelectionConfig& cfg, Rng& rng) {
  const Eigen::Index n = ut.size();
  const int k = int(thetas.size());
  require(k >= 1, Errc::ConfigError, "no candidates to score");
  require(n >= 8, Errc::ConfigError, "too few points for subset voting");
  for (const Mat& th : thetas)
    require(th.rows() == n, Errc::DimensionMismatch, "theta rows");
  const int half = int(n / 2);
  const int quarter = int(n / 4);
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<Rng> streams;
  streams.reserve(std::size_t(cfg.n_s));
  for (int i = 0; i < cfg.n_s; ++i)
    streams.push_back(rng.child(std::uint64_t(i)));

  Mat scores(k, cfg.n_s);
  parallel_for(std::size_t(cfg.n_s), [&](std::size_t i) {
    Rng& stream = streams[i];
    std::vector<int> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    stream.shuffle(all);
    std::vector<int> subset(all.begin(), all.begin() + half);

    // subsample index sets are shared by all candidates in this subset
    std::vector<std::vector<int>> subs;
    subs.reserve(std::size_t(cfg.n_p));
    for (int j = 0; j < cfg.n_p; ++j) {
      std::vector<int> b = subset;
      stream.shuffle(b);
      b.resize(std::size_t(quarter));
      subs.push_back(std::move(b));
    }

    for (int c = 0; c < k; ++c) {
      const Mat& th = thetas[std::size_t(c)];
      if (th.cols() == 0) {
        scores(c, Eigen::Index(i)) = inf;
        continue;
      }
      const Mat ths = detail::gather_rows(th, subset);
      const Vec uts = detail::gather(ut, subset);
      const Vec xi = ths.colPivHouseholderQr().solve(uts);
      if (!xi.allFinite()) {
        scores(c, Eigen::Index(i)) = inf;
        continue;
      }
      const double mse = (ths * xi - uts).squaredNorm() / double(half);

      Mat coef(th.cols(), cfg.n_p);
      bool ok = true;
      for (int j = 0; j < cfg.n_p && ok; ++j) {
        const Mat thb = detail::gather_rows(th, subs[std::size_t(j)]);
        const Vec utb = detail::gather(ut, subs[std::size_t(j)]);
        const Vec xib = thb.colPivHouseholderQr().solve(utb);
        ok = xib.allFinite();
        if (ok) coef.col(j) = xib;
      }
      if (!ok) {
        scores(c, Eigen::Index(i)) = inf;
        continue;
      }
      double cv_sum = 0;
      for (Eigen::Index t = 0; t < coef.rows(); ++t)
        cv_sum += term_cv(coef.row(t).transpose());
      const double cv = cv_sum / double(coef.rows());
      scores(c, Eigen::Index(i)) = mse * cv;
    }
  });
  return scores;
}

// Turns the score matrix into votes: each subset's minimal score wins, ties
// break toward the lower candidate index (higher original reward).
inline std::vector<int> tally_votes(const Mat& scores) {
  std::vector<int> votes(std::size_t(scores.rows()), 0);
  for (Eigen::Index i = 0; i < scores.cols(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.rows(); ++c)
      if (scores(c, i) < scores(best, i)) best = c;
    votes[std::size_t(best)]++;
  }
  return votes;
}

// Majority voting across bootstrap subsets of the basis points. Candidates
// keep their incoming order; index 0 is the incumbent that wins all ties.
inline SelectionReport select(const std::vector<PdeCandidate>& candidates,
                              EvalBasis& basis, EvalCache* cache,
                              const SelectionConfig& cfg, Rng& rng) {
  require(!candidates.empty(), Errc::ConfigError, "no candidates");
  std::vector<Mat> thetas;
  thetas.reserve(candidates.size());
  for (const PdeCandidate& c : candidates) {
    if (c.terms.empty()) {
      thetas.emplace_back(basis.n_points(), 0);
    } else {
      thetas.push_back(build_theta(c.terms, basis, cache).theta);
    }
  }
  SelectionReport rep;
  rep.candidates = candidates;
  rep.scores = stability_scores(thetas, basis.ut().matrix(), cfg, rng);
  rep.votes = tally_votes(rep.scores);
  rep.winner = 0;
  for (std::size_t c = 1; c < rep.votes.size(); ++c)
    if (rep.votes[c] > rep.votes[std::size_t(rep.winner)]) rep.winner = int(c);
  return rep;
}

inline nlohmann::json selection_to_json(const SelectionReport& rep,
                                        const TokenLibrary& lib) {
  nlohmann::json j;
  j["winner"] = rep.winner;
  j["votes"] = rep.votes;
  j["n_subsets"] = rep.scores.cols();
  for (std::size_t c = 0; c < rep.candidates.size(); ++c) {
    nlohmann::json e = candidate_to_json(rep.candidates[c], lib);
    e["votes"] = rep.votes[c];
    double finite_sum = 0;
    int finite_n = 0;
    for (Eigen::Index i = 0; i < rep.scores.cols(); ++i) {
      const double s = rep.scores(Eigen::Index(c), i);
      if (std::isfinite(s)) {
        finite_sum += s;
        finite_n++;
      }
    }
    e["mean_score"] = finite_n ? finite_sum / finite_n : -1.0;
    j["candidates"].push_back(e);
  }
  return j;
}

}  // namespace pded
