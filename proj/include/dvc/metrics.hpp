#pragma once

// Dataset-level detection metrics, stratified reports, Welch's t statistic
// and patient-grouped fold assignment.
//
// Counting rules at a single tau_iou:
//   TP  ground truths whose best final overlaps at >= tau_iou
//   FN  remaining ground truths
//   FP  finals left unmatched by greedy one-to-one matching at tau_iou, so a
//       duplicate detection of one polyp counts as a false positive
// mIoU is the mean IoU over the one-to-one matched (final, ground truth) pairs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc/cascade.hpp"
#include "dvc/geometry.hpp"

namespace dvc {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts accumulate_frame(const std::vector<Candidate>& finals, const std::vector<BoundingBox>& gts,
                                        double tau_iou) {
  ConfusionCounts c;
  for (const auto& gt : gts) {
    if (detected(gt, finals, tau_iou)) {
      ++c.tp;
    } else {
      ++c.fn;
    }
  }
  c.fp = greedy_match(finals, gts, tau_iou).unmatched_predictions.size();
  return c;
}

/// Sums counts over frames; frames that failed at the backend are skipped.
inline ConfusionCounts accumulate(const std::vector<FrameResult>& results, double tau_iou) {
  ConfusionCounts total;
  for (const auto& r : results) {
    if (!r.error) total += accumulate_frame(r.finals, r.ground_truths, tau_iou);
  }
  return total;
}

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  bool degenerate = false;  // a zero denominator was replaced by 0
};

inline PrecisionRecall precision_recall(const ConfusionCounts& c) {
  PrecisionRecall pr;
  const auto pd = c.tp + c.fp;
  const auto rd = c.tp + c.fn;
  pr.precision = pd ? static_cast<double>(c.tp) / static_cast<double>(pd) : 0.0;
  pr.recall = rd ? static_cast<double>(c.tp) / static_cast<double>(rd) : 0.0;
  pr.degenerate = pd == 0 || rd == 0;
  return pr;
}

struct MeanIou {
  double value = 0.0;
  std::size_t pairs = 0;
  bool degenerate = true;
};

inline MeanIou mean_iou(const std::vector<FrameResult>& results, double tau_iou) {
  MeanIou m;
  double sum = 0.0;
  for (const auto& r : results) {
    if (r.error) continue;
    for (const auto& p : greedy_match(r.finals, r.ground_truths, tau_iou).pairs) {
      sum += p.iou;
      ++m.pairs;
    }
  }
  if (m.pairs > 0) {
    m.value = sum / static_cast<double>(m.pairs);
    m.degenerate = false;
  }
  return m;
}

/// Welch's t with unbiased sample variances.
inline double welch_t(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("welch_t needs at least 2 samples per group");
  auto moments = [](const std::vector<double>& x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  if (va == 0.0 && vb == 0.0) {
    if (ma == mb) return 0.0;
    throw std::invalid_argument("welch_t undefined when both sample variances are zero");
  }
  return (ma - mb) / std::sqrt(va / static_cast<double>(a.size()) + vb / static_cast<double>(b.size()));
}

// ---------------------------------------------------------------------------
// Patient-grouped stratified folds

struct SplitItem {
  std::string frame_id;
  std::string patient_id;
  std::size_t polyps = 0;
};

struct FoldStats {
  std::size_t frames = 0;
  std::size_t polyps = 0;
  std::size_t patients = 0;

  double polyp_rate() const noexcept { return frames ? static_cast<double>(polyps) / static_cast<double>(frames) : 0.0; }
};

struct FoldAssignment {
  std::vector<std::size_t> fold_of;  // parallel to the input items
  std::vector<FoldStats> folds;

  // Largest |rate_f - global| / global over folds; 0 when there are no polyps.
  double max_relative_deviation() const {
    FoldStats all;
    for (const auto& f : folds) {
      all.frames += f.frames;
      all.polyps += f.polyps;
    }
    const double global = all.polyp_rate();
    if (global == 0.0) return 0.0;
    double worst = 0.0;
    for (const auto& f : folds) worst = std::max(worst, std::fabs(f.polyp_rate() - global) / global);
    return worst;
  }
};

/// Assigns whole patients to k folds. Patients are visited largest first
/// (frames, then polyps; a seeded shuffle breaks ties) and each goes to the
/// fold that minimises the squared relative imbalance of frame and polyp
/// totals. Folds still empty are filled first when patients run short. Moves
/// and swaps of whole patients then polish the greedy result.
inline FoldAssignment stratified_split(const std::vector<SplitItem>& items, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_split needs k >= 2");
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> index;
  std::vector<FoldStats> patient;
  for (const auto& it : items) {
    if (it.patient_id.empty()) throw std::invalid_argument("frame " + it.frame_id + " has no patient_id");
    auto [pos, fresh] = index.emplace(it.patient_id, ids.size());
    if (fresh) {
      ids.push_back(it.patient_id);
      patient.emplace_back();
    }
    auto& p = patient[pos->second];
    ++p.frames;
    p.polyps += it.polyps;
  }
  if (k > ids.size()) throw std::invalid_argument("more folds than patients");

  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (patient[a].frames != patient[b].frames) return patient[a].frames > patient[b].frames;
    return patient[a].polyps > patient[b].polyps;
  });

  double total_frames = 0.0, total_polyps = 0.0;
  for (const auto& p : patient) {
    total_frames += static_cast<double>(p.frames);
    total_polyps += static_cast<double>(p.polyps);
  }
  const double target_frames = total_frames / static_cast<double>(k);
  const double target_polyps = total_polyps / static_cast<double>(k);

  std::vector<FoldStats> folds(k);
  std::vector<std::size_t> fold_of_patient(ids.size(), 0);
  auto cost = [&](const std::vector<FoldStats>& fs) {
    double c = 0.0;
    for (const auto& f : fs) {
      const double df = (static_cast<double>(f.frames) - target_frames) / target_frames;
      c += df * df;
      if (target_polyps > 0.0) {
        const double dp = (static_cast<double>(f.polyps) - target_polyps) / target_polyps;
        c += dp * dp;
      }
    }
    return c;
  };
  for (std::size_t visited = 0; visited < order.size(); ++visited) {
    const std::size_t p = order[visited];
    const auto empty = static_cast<std::size_t>(std::count_if(folds.begin(), folds.end(), [](const FoldStats& f) {
      return f.patients == 0;
    }));
    const bool must_fill = empty >= order.size() - visited;
    std::size_t best = k;
    double best_cost = INFINITY;
    for (std::size_t f = 0; f < k; ++f) {
      if (must_fill && folds[f].patients != 0) continue;
      auto trial = folds;
      trial[f].frames += patient[p].frames;
      trial[f].polyps += patient[p].polyps;
      const double c = cost(trial);
      if (c < best_cost - 1e-12) {
        best_cost = c;
        best = f;
      }
    }
    folds[best].frames += patient[p].frames;
    folds[best].polyps += patient[p].polyps;
    ++folds[best].patients;
    fold_of_patient[p] = best;
  }

  // Refinement: single moves, then pairwise swaps, while either lowers the cost.
  auto shift = [&](std::size_t p, std::size_t from, std::size_t to) {
    folds[from].frames -= patient[p].frames;
    folds[from].polyps -= patient[p].polyps;
    --folds[from].patients;
    folds[to].frames += patient[p].frames;
    folds[to].polyps += patient[p].polyps;
    ++folds[to].patients;
    fold_of_patient[p] = to;
  };
  for (bool improved = true; improved;) {
    improved = false;
    double current = cost(folds);
    for (std::size_t p : order) {
      const std::size_t from = fold_of_patient[p];
      if (folds[from].patients < 2) continue;
      for (std::size_t to = 0; to < k; ++to) {
        if (to == from) continue;
        shift(p, from, to);
        const double c = cost(folds);
        if (c < current - 1e-12) {
          current = c;
          improved = true;
          break;
        }
        shift(p, to, from);
      }
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
      for (std::size_t j = i + 1; j < order.size(); ++j) {
        const std::size_t a = order[i], b = order[j];
        const std::size_t fa = fold_of_patient[a], fb = fold_of_patient[b];
        if (fa == fb) continue;
        shift(a, fa, fb);
        shift(b, fb, fa);
        const double c = cost(folds);
        if (c < current - 1e-12) {
          current = c;
          improved = true;
        } else {
          shift(b, fa, fb);
          shift(a, fb, fa);
        }
      }
    }
  }

  FoldAssignment out;
  out.folds = std::move(folds);
  out.fold_of.reserve(items.size());
  for (const auto& it : items) out.fold_of.push_back(fold_of_patient[index.at(it.patient_id)]);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

// Percentages are carried as integer tenths so that rounding (half up, one
// decimal) and the differences between rounded values are exact.
inline std::int64_t percent_tenths(double fraction) {
  return static_cast<std::int64_t>(std::floor(fraction * 1000.0 + 0.5 + 1e-9));
}

inline std::int64_t tenths_from_printed(double percent) {
  return static_cast<std::int64_t>(std::floor(percent * 10.0 + 0.5 + 1e-9));
}

inline std::string format_tenths(std::int64_t t, bool with_sign = false) {
  std::string s;
  if (t < 0) {
    s = "-";
    t = -t;
  } else if (with_sign) {
    s = "+";
  }
  return s + std::to_string(t / 10) + "." + std::to_string(t % 10);
}

struct MetricTriple {
  ConfusionCounts counts;
  double precision = 0.0;
  double recall = 0.0;
  double miou = 0.0;
  bool degenerate = false;
  std::size_t frames = 0;
};

inline MetricTriple metric_triple(const std::vector<FrameResult>& results, double tau_iou) {
  MetricTriple m;
  m.counts = accumulate(results, tau_iou);
  const auto pr = precision_recall(m.counts);
  const auto mi = mean_iou(results, tau_iou);
  m.precision = pr.precision;
  m.recall = pr.recall;
  m.miou = mi.value;
  m.degenerate = pr.degenerate || mi.degenerate;
  for (const auto& r : results) m.frames += r.error ? 0 : 1;
  return m;
}

struct LatencySummary {
  std::size_t frames = 0;
  double mean_ms = 0.0;
  double p95_ms = 0.0;
};

/// Mean and nearest-rank p95 of t_preprocess + t_detect + sum(t_verify) + t_postprocess.
inline LatencySummary latency_summary(const std::vector<FrameResult>& results) {
  std::vector<double> totals;
  for (const auto& r : results) {
    if (!r.error) totals.push_back(r.timing.total());
  }
  LatencySummary s;
  s.frames = totals.size();
  if (totals.empty()) return s;
  std::sort(totals.begin(), totals.end());
  double sum = 0.0;
  for (double t : totals) sum += t;
  s.mean_ms = sum / static_cast<double>(totals.size());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(totals.size())));
  s.p95_ms = totals[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

struct ConfigurationRun {
  std::string name;
  std::vector<FrameResult> results;
};

struct ConfigurationReport {
  std::string name;
  MetricTriple overall;
  std::map<std::string, MetricTriple> per_condition;  // only strata present in the data
  std::map<std::string, MetricTriple> per_tag;
  std::optional<std::int64_t> delta_recall_tenths;  // vs. the first configuration
  LatencySummary latency;
  std::vector<std::string> failed_frames;
};

struct StratifiedReport {
  double tau_iou = 0.3;
  std::vector<ConfigurationReport> configurations;
};

inline StratifiedReport build_report(const std::vector<ConfigurationRun>& runs, double tau_iou) {
  StratifiedReport report;
  report.tau_iou = tau_iou;
  for (const auto& run : runs) {
    ConfigurationReport c;
    c.name = run.name;
    c.overall = metric_triple(run.results, tau_iou);
    std::map<std::string, std::vector<FrameResult>> by_condition, by_tag;
    for (const auto& r : run.results) {
      if (r.error) {
        c.failed_frames.push_back(r.frame_id);
        continue;
      }
      by_condition[to_string(r.condition)].push_back(r);
      for (const auto& t : r.degradation_tags) by_tag[t].push_back(r);
    }
    for (const auto& [k, v] : by_condition) c.per_condition[k] = metric_triple(v, tau_iou);
    for (const auto& [k, v] : by_tag) c.per_tag[k] = metric_triple(v, tau_iou);
    c.latency = latency_summary(run.results);
    report.configurations.push_back(std::move(c));
  }
  if (!report.configurations.empty()) {
    const auto base = percent_tenths(report.configurations.front().overall.recall);
    for (std::size_t i = 1; i < report.configurations.size(); ++i) {
      report.configurations[i].delta_recall_tenths = percent_tenths(report.configurations[i].overall.recall) - base;
    }
  }
  return report;
}

inline json metric_to_json(const MetricTriple& m) {
  return {{"tp", m.counts.tp},       {"fp", m.counts.fp},
          {"fn", m.counts.fn},       {"precision", m.precision},
          {"recall", m.recall},      {"miou", m.miou},
          {"precision_pct", format_tenths(percent_tenths(m.precision))},
          {"recall_pct", format_tenths(percent_tenths(m.recall))},
          {"miou_pct", format_tenths(percent_tenths(m.miou))},
          {"degenerate", m.degenerate}, {"frames", m.frames}};
}

// Everything except the "latency" objects is independent of wall-clock time.
inline json report_to_json(const StratifiedReport& r, bool with_latency = true) {
  json configs = json::array();
  for (const auto& c : r.configurations) {
    json j = {{"name", c.name}, {"overall", metric_to_json(c.overall)}, {"failed_frames", c.failed_frames}};
    j["per_condition"] = json::object();
    for (const auto& [k, v] : c.per_condition) j["per_condition"][k] = metric_to_json(v);
    j["per_tag"] = json::object();
    for (const auto& [k, v] : c.per_tag) j["per_tag"][k] = metric_to_json(v);
    j["delta_recall_pp"] = c.delta_recall_tenths ? json(format_tenths(*c.delta_recall_tenths, true)) : json(nullptr);
    if (with_latency) j["latency"] = {{"frames", c.latency.frames}, {"mean_ms", c.latency.mean_ms}, {"p95_ms", c.latency.p95_ms}};
    configs.push_back(std::move(j));
  }
  return {{"tau_iou", r.tau_iou},
          {"miou_definition", "mean IoU over one-to-one matched (final, ground truth) pairs"},
          {"configurations", configs}};
}

namespace detail {

inline std::string pad(const std::string& s, std::size_t w, bool left = false) {
  if (s.size() >= w) return s;
  return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

}  // namespace detail

inline std::string report_to_table(const StratifiedReport& r) {
  std::ostringstream out;
  out << detail::pad("Configuration", 28, true) << detail::pad("Stratum", 22, true) << detail::pad("P", 7)
      << detail::pad("R", 7) << detail::pad("mIoU", 7) << detail::pad("dR", 7) << detail::pad("TP", 6)
      << detail::pad("FP", 6) << detail::pad("FN", 6) << '\n';
  auto row = [&](const std::string& cfg, const std::string& stratum, const MetricTriple& m,
                 const std::string& delta) {
    out << detail::pad(cfg, 28, true) << detail::pad(stratum, 22, true)
        << detail::pad(format_tenths(percent_tenths(m.precision)), 7)
        << detail::pad(format_tenths(percent_tenths(m.recall)), 7)
        << detail::pad(format_tenths(percent_tenths(m.miou)), 7) << detail::pad(delta, 7)
        << detail::pad(std::to_string(m.counts.tp), 6) << detail::pad(std::to_string(m.counts.fp), 6)
        << detail::pad(std::to_string(m.counts.fn), 6) << '\n';
  };
  for (const auto& c : r.configurations) {
    row(c.name, "overall", c.overall, c.delta_recall_tenths ? format_tenths(*c.delta_recall_tenths, true) : "--");
    for (const auto& [k, v] : c.per_condition) row("", "condition:" + k, v, "");
    for (const auto& [k, v] : c.per_tag) row("", "tag:" + k, v, "");
  }
  return out.str();
}

/// Plot data: one CSV row per (configuration, stratum).
inline std::string report_to_csv(const StratifiedReport& r) {
  std::ostringstream out;
  out << "configuration,stratum_kind,stratum,precision,recall,miou,tp,fp,fn\n";
  auto row = [&](const std::string& cfg, const std::string& kind, const std::string& name, const MetricTriple& m) {
    out << cfg << ',' << kind << ',' << name << ',' << format_tenths(percent_tenths(m.precision)) << ','
        << format_tenths(percent_tenths(m.recall)) << ',' << format_tenths(percent_tenths(m.miou)) << ','
        << m.counts.tp << ',' << m.counts.fp << ',' << m.counts.fn << '\n';
  };
  for (const auto& c : r.configurations) {
    row(c.name, "overall", "all", c.overall);
    for (const auto& [k, v] : c.per_condition) row(c.name, "condition", k, v);
    for (const auto& [k, v] : c.per_tag) row(c.name, "tag", k, v);
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Ablation tables (precision/recall given as printed percentages)

struct AblationRow {
  std::string name;
  std::optional<double> precision_pct;
  std::optional<double> recall_pct;
  std::optional<std::string> error;
};

struct AblationLine {
  std::string name;
  std::string precision;
  std::string recall;
  std::string delta_recall;  // "--" for the baseline or failed rows
  std::optional<std::string> error;
};

inline std::vector<AblationLine> ablation_table(const std::vector<AblationRow>& rows) {
  if (rows.size() < 2) throw std::invalid_argument("an ablation needs a baseline and at least one variant");
  std::vector<AblationLine> out;
  std::optional<std::int64_t> base;
  if (rows.front().recall_pct) base = tenths_from_printed(*rows.front().recall_pct);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    AblationLine line{r.name, "--", "--", "--", r.error};
    if (!r.error && r.precision_pct && r.recall_pct) {
      line.precision = format_tenths(tenths_from_printed(*r.precision_pct));
      const auto rec = tenths_from_printed(*r.recall_pct);
      line.recall = format_tenths(rec);
      if (i > 0 && base) line.delta_recall = format_tenths(rec - *base, true);
    }
    out.push_back(std::move(line));
  }
  return out;
}

inline std::string ablation_to_text(const std::vector<AblationLine>& lines) {
  std::ostringstream out;
  out << detail::pad("Configuration", 32, true) << detail::pad("Precision", 11) << detail::pad("Recall", 9)
      << detail::pad("dR", 8) << '\n';
  for (const auto& l : lines) {
    out << detail::pad(l.name, 32, true) << detail::pad(l.precision, 11) << detail::pad(l.recall, 9)
        << detail::pad(l.delta_recall, 8);
    if (l.error) out << "  (failed: " << *l.error << ')';
    out << '\n';
  }
  return out.str();
}

}  // namespace dvc
