// Report rendering: reward-trajectory SVG, field-reconstruction BMP
// heatmaps, and CSV extracts of the trajectory and the per-round vote
// tables. Everything renders from a RunReport alone, so a saved report
// file regenerates its artifacts without re-running the pipeline.
#pragma once

#include "pded/orchestrator.hpp"

#include <filesystem>
#include <fstream>

namespace pded {

// ───────────────────────── bitmap heatmaps ─────────────────────────

namespace detail {

struct Rgb {
  unsigned char r, g, b;
};

// Five-anchor dark-violet → yellow ramp, linearly interpolated.
inline Rgb colormap(double v) {
  static const double anchor[5][3] = {{68, 1, 84},
                                      {59, 82, 139},
                                      {33, 145, 140},
                                      {94, 201, 98},
                                      {253, 231, 37}};
  v = std::min(1.0, std::max(0.0, v));
  const double pos = v * 4.0;
  const int lo = std::min(3, int(pos));
  const double f = pos - lo;
  auto mix = [&](int c) {
    return (unsigned char)(anchor[lo][c] + f * (anchor[lo + 1][c] - anchor[lo][c]) + 0.5);
  };
  return {mix(0), mix(1), mix(2)};
}

}  // namespace detail

// 24-bit uncompressed BMP; `pixels` is row-major top-to-bottom, w*h long.
inline void write_bmp(const std::string& path,
                      const std::vector<detail::Rgb>& pixels, int w, int h) {
  require(w > 0 && h > 0 && int(pixels.size()) == w * h, Errc::ConfigError,
          "bitmap dimensions do not match pixel count");
  const int row_bytes = (3 * w + 3) / 4 * 4;
  const std::uint32_t data_size = std::uint32_t(row_bytes) * std::uint32_t(h);
  const std::uint32_t file_size = 54 + data_size;
  std::ofstream out(path, std::ios::binary);
  require(bool(out), Errc::IoError, "cannot open '" + path + "' for writing");
  auto u16 = [&](std::uint16_t v) { out.write((const char*)&v, 2); };
  auto u32 = [&](std::uint32_t v) { out.write((const char*)&v, 4); };
  out.write("BM", 2);
  u32(file_size);
  u32(0);
  u32(54);            // pixel data offset
  u32(40);            // BITMAPINFOHEADER
  u32(std::uint32_t(w));
  u32(std::uint32_t(h));
  u16(1);             // planes
  u16(24);            // bits per pixel
  u32(0);             // no compression
  u32(data_size);
  u32(2835);          // 72 dpi
  u32(2835);
  u32(0);
  u32(0);
  std::vector<char> row(std::size_t(row_bytes), 0);
  for (int y = h - 1; y >= 0; --y) {  // BMP rows are bottom-up
    for (int x = 0; x < w; ++x) {
      const detail::Rgb& p = pixels[std::size_t(y) * std::size_t(w) + std::size_t(x)];
      row[std::size_t(3 * x) + 0] = char(p.b);
      row[std::size_t(3 * x) + 1] = char(p.g);
      row[std::size_t(3 * x) + 2] = char(p.r);
    }
    out.write(row.data(), row_bytes);
  }
  require(bool(out), Errc::IoError, "write failed for '" + path + "'");
}

// Field heatmap: x downward, t rightward, colors spanning [lo, hi].
inline void write_heatmap(const std::string& path, const Arr& field,
                          double lo, double hi) {
  const int h = int(field.rows()), w = int(field.cols());
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<detail::Rgb> px(std::size_t(w) * std::size_t(h));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      px[std::size_t(i) * std::size_t(w) + std::size_t(j)] =
          detail::colormap((field(i, j) - lo) / span);
  write_bmp(path, px, w, h);
}

// ───────────────────────── trajectory plot ─────────────────────────

// Best reward and the top-ε mean per iteration as one SVG, with dashed
// vertical separators at round boundaries.
inline std::string render_trajectory_svg(const RunReport& rep) {
  const int W = 860, H = 420, ml = 64, mr = 16, mt = 28, mb = 44;
  const int pw = W - ml - mr, ph = H - mt - mb;
  const std::size_t n = rep.trajectory.size();
  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
       std::to_string(W) + "\" height=\"" + std::to_string(H) + "\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (n == 0) {
    s += "<text x=\"20\" y=\"40\" font-family=\"sans-serif\">no trajectory "
         "recorded</text>\n</svg>\n";
    return s;
  }
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const TrajectoryRow& r : rep.trajectory) {
    for (double v : {r.best, r.top_mean}) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](std::size_t i) {
    return ml + (n == 1 ? pw / 2.0 : double(i) * pw / double(n - 1));
  };
  auto py = [&](double v) { return mt + (hi - v) / (hi - lo) * ph; };
  auto fmt = [&](double v) { return detail::fmt_g6(v); };

  // axes + labels
  s += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(mt) +
       "\" x2=\"" + std::to_string(ml) + "\" y2=\"" + std::to_string(mt + ph) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + std::to_string(ml) + "\" y1=\"" + std::to_string(mt + ph) +
       "\" x2=\"" + std::to_string(ml + pw) + "\" y2=\"" +
       std::to_string(mt + ph) + "\" stroke=\"black\"/>\n";
  s += "<text x=\"" + std::to_string(ml - 6) + "\" y=\"" + std::to_string(mt + 4) +
       "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\">" +
       fmt(hi) + "</text>\n";
  s += "<text x=\"" + std::to_string(ml - 6) + "\" y=\"" +
       std::to_string(mt + ph) +
       "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\">" +
       fmt(lo) + "</text>\n";
  s += "<text x=\"" + std::to_string(ml + pw / 2) + "\" y=\"" +
       std::to_string(H - 10) +
       "\" text-anchor=\"middle\" font-size=\"13\" "
       "font-family=\"sans-serif\">iteration</text>\n";
  s += "<text x=\"16\" y=\"" + std::to_string(mt + ph / 2) +
       "\" font-size=\"13\" font-family=\"sans-serif\" transform=\"rotate(-90 "
       "16 " + std::to_string(mt + ph / 2) + ")\" text-anchor=\"middle\">"
       "reward</text>\n";

  // round separators
  for (std::size_t i = 1; i < n; ++i) {
    if (rep.trajectory[i].round != rep.trajectory[i - 1].round) {
      const double x = (px(i - 1) + px(i)) / 2.0;
      s += "<line x1=\"" + fmt(x) + "\" y1=\"" + std::to_string(mt) +
           "\" x2=\"" + fmt(x) + "\" y2=\"" + std::to_string(mt + ph) +
           "\" stroke=\"green\" stroke-dasharray=\"6 4\"/>\n";
    }
  }

  auto polyline = [&](const char* color, double TrajectoryRow::*field) {
    std::string pts;
    for (std::size_t i = 0; i < n; ++i) {
      pts += fmt(px(i)) + "," + fmt(py(rep.trajectory[i].*field));
      if (i + 1 < n) pts += " ";
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
         "\" stroke-width=\"1.6\" points=\"" + pts + "\"/>\n";
  };
  polyline("#d62728", &TrajectoryRow::best);
  polyline("#1f77b4", &TrajectoryRow::top_mean);

  s += "<text x=\"" + std::to_string(ml + 10) + "\" y=\"" +
       std::to_string(mt + 16) +
       "\" font-size=\"12\" font-family=\"sans-serif\" fill=\"#d62728\">best "
       "reward</text>\n";
  s += "<text x=\"" + std::to_string(ml + 10) + "\" y=\"" +
       std::to_string(mt + 32) +
       "\" font-size=\"12\" font-family=\"sans-serif\" fill=\"#1f77b4\">top "
       "fraction mean</text>\n";
  s += "</svg>\n";
  return s;
}

// ───────────────────────── csv extracts ─────────────────────────

inline std::string trajectory_csv(const RunReport& rep) {
  std::string s = "round,iteration,best,top_mean,batch_mean\n";
  for (const TrajectoryRow& r : rep.trajectory)
    s += std::to_string(r.round) + "," + std::to_string(r.iteration) + "," +
         detail::fmt_g17(r.best) + "," + detail::fmt_g17(r.top_mean) + "," +
         detail::fmt_g17(r.batch_mean) + "\n";
  return s;
}

inline std::string votes_csv(const RoundReport& rr, const TokenLibrary& lib) {
  std::string s = "rank,votes,reward,rmse,n_terms,equation\n";
  for (std::size_t c = 0; c < rr.selection.candidates.size(); ++c) {
    const PdeCandidate& cand = rr.selection.candidates[c];
    std::string eq = equation_string(cand, lib);
    for (char& ch : eq)
      if (ch == ',') ch = ';';
    s += std::to_string(c) + "," + std::to_string(rr.selection.votes[c]) +
         "," + detail::fmt_g17(cand.reward) + "," +
         detail::fmt_g17(std::isfinite(cand.rmse) ? cand.rmse : -1.0) + "," +
         std::to_string(cand.n_terms) + "," + eq + "\n";
  }
  return s;
}

// ───────────────────────── artifact bundle ─────────────────────────

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), Errc::IoError, "cannot open '" + path + "' for writing");
  out << text;
  require(bool(out), Errc::IoError, "write failed for '" + path + "'");
}

}  // namespace detail

// Writes report.json plus every derived artifact into `dir`:
// trajectory.csv, reward_curve.svg, votes_round<k>.csv, and the
// field/prediction/error heatmaps when a prediction exists.
inline void write_report_artifacts(const RunReport& rep,
                                   const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, Errc::IoError, "cannot create directory '" + dir + "'");
  const fs::path base(dir);

  save_json_file(report_to_json(rep), (base / "report.json").string());
  detail::write_text((base / "trajectory.csv").string(), trajectory_csv(rep));
  detail::write_text((base / "reward_curve.svg").string(),
                     render_trajectory_svg(rep));

  const RunConfig cfg = config_from_json(rep.config);
  const TokenLibrary lib = make_library(cfg.library);
  for (std::size_t k = 0; k < rep.rounds.size(); ++k)
    detail::write_text(
        (base / ("votes_round" + std::to_string(k + 1) + ".csv")).string(),
        votes_csv(rep.rounds[k], lib));

  if (rep.prediction.size() && !rep.reference.fields.empty()) {
    const Arr& truth = rep.reference.field(cfg.data.var);
    const double lo = truth.minCoeff(), hi = truth.maxCoeff();
    write_heatmap((base / "field_reference.bmp").string(), truth, lo, hi);
    write_heatmap((base / "field_prediction.bmp").string(), rep.prediction,
                  lo, hi);
    const Arr err = (rep.prediction - truth).abs();
    write_heatmap((base / "field_error.bmp").string(), err, 0.0,
                  std::max(err.maxCoeff(), 1e-300));
  }
}

}  // namespace pded
