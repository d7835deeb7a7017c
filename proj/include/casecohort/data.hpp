#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "casecohort/errors.hpp"

namespace casecohort {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/**
 * Two-phase sampling design: every subject enters the subcohort with
 * probability q_subcohort; failures outside the subcohort are additionally
 * selected with probability q_case. Both constants are fixed by design.
 */
struct SamplingDesign {
  double q_subcohort = 1.0;
  double q_case = 1.0;

  SamplingDesign() = default;
  SamplingDesign(double qs, double qc) : q_subcohort(qs), q_case(qc) {
    if (!(qs > 0.0) || qs > 1.0)
      throw DomainError("subcohort sampling probability must lie in (0, 1]");
    if (!(qc > 0.0) || qc > 1.0)
      throw DomainError("case sampling probability must lie in (0, 1]");
  }
};

// Probability that a subject's full covariate record is observed:
// q_s for non-failures, q_s + (1 - q_s) q_c for failures.
inline double inclusion_probability(bool is_case, const SamplingDesign& design) {
  const double qs = design.q_subcohort;
  return is_case ? qs + (1.0 - qs) * design.q_case : qs;
}

/**
 * One subject. The failure time is only known to fall in (left, right];
 * right == +inf means the event was never observed. Covariates split into
 * phase-one columns, available for everyone (cheap, aux), and phase-two
 * columns measured only on the sampled subset (expensive).
 */
struct IntervalObservation {
  std::string id;
  double left = 0.0;
  double right = kInf;
  std::vector<double> cheap;                    // measured on the full cohort
  std::vector<double> aux;                      // error-prone stand-in, full cohort
  std::optional<std::vector<double>> expensive; // engaged iff sampled
  bool in_subcohort = false;
  bool selected_case = false;
  bool sampled = false;

  bool is_case() const { return std::isfinite(right); }
};

// Inverse-probability weight: 0 when unsampled, 1/pi otherwise.
inline double sampling_weight(bool is_case, bool sampled,
                              const SamplingDesign& design) {
  if (!sampled) return 0.0;
  return 1.0 / inclusion_probability(is_case, design);
}

inline double sampling_weight(const IntervalObservation& obs,
                              const SamplingDesign& design) {
  return sampling_weight(obs.is_case(), obs.sampled, design);
}

struct CohortDataset {
  std::vector<IntervalObservation> subjects;
  SamplingDesign design;
  std::vector<std::string> cheap_names;
  std::vector<std::string> aux_names;
  std::vector<std::string> expensive_names;

  std::size_t size() const { return subjects.size(); }
  bool has_aux() const { return !aux_names.empty(); }
  bool has_cheap() const { return !cheap_names.empty(); }

  std::size_t case_count() const {
    std::size_t c = 0;
    for (const auto& s : subjects) c += s.is_case();
    return c;
  }
  std::size_t sampled_count() const {
    std::size_t c = 0;
    for (const auto& s : subjects) c += s.sampled;
    return c;
  }
};

inline std::vector<double> sampling_weights(const CohortDataset& data) {
  std::vector<double> w(data.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = sampling_weight(data.subjects[i], data.design);
  return w;
}

// Re-estimates the design constants from the realized indicators. Useful
// when the nominal probabilities are not recorded with the data.
inline SamplingDesign estimate_design(const CohortDataset& data) {
  std::size_t subcohort = 0, cases_outside = 0, selected_outside = 0;
  for (const auto& s : data.subjects) {
    subcohort += s.in_subcohort;
    if (s.is_case() && !s.in_subcohort) {
      ++cases_outside;
      selected_outside += s.selected_case;
    }
  }
  if (data.size() == 0) throw DomainError("cannot estimate design from empty data");
  const double qs = static_cast<double>(subcohort) / static_cast<double>(data.size());
  const double qc = cases_outside == 0
                        ? 1.0
                        : static_cast<double>(selected_outside) /
                              static_cast<double>(cases_outside);
  if (!(qs > 0.0)) throw DomainError("no subcohort members in data");
  return SamplingDesign(qs, std::min(qc, 1.0));
}

/**
 * Collapses an examination history to the bracketing interval. `exam_times`
 * holds the K attended times U_1 < ... < U_K (K >= 1, all positive) and
 * `event_flags` holds K+1 gap indicators: flag k (0-based) set means the
 * event fell in (U_k, U_{k+1}] with U_0 = 0, and the last flag means it was
 * never observed. Exactly one flag must be set. Returns (left, right] with
 * right = +inf on the final flag.
 */
inline std::pair<double, double> reduce_exam_history(
    std::span<const double> exam_times, std::span<const int> event_flags) {
  if (exam_times.empty())
    throw DomainError("examination history needs at least one attended exam");
  if (event_flags.size() != exam_times.size() + 1)
    throw DomainError("event flags must number one more than the exam times");
  double prev = 0.0;
  for (double t : exam_times) {
    if (!(t > prev) || !std::isfinite(t))
      throw DomainError("exam times must be finite, positive, strictly increasing");
    prev = t;
  }
  std::size_t set_count = 0, where = 0;
  for (std::size_t k = 0; k < event_flags.size(); ++k) {
    if (event_flags[k] != 0 && event_flags[k] != 1)
      throw DomainError("event flags must be 0 or 1");
    if (event_flags[k] == 1) {
      ++set_count;
      where = k;
    }
  }
  if (set_count != 1)
    throw DomainError("exactly one event flag must be set, got " +
                      std::to_string(set_count));
  if (where == exam_times.size()) return {exam_times.back(), kInf};
  return {where == 0 ? 0.0 : exam_times[where - 1], exam_times[where]};
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::string trimmed(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline double parse_number(const std::string& field, std::size_t line_no,
                           const std::string& what) {
  const std::string s = trimmed(field);
  if (s.empty())
    throw DataFormatError("line " + std::to_string(line_no) + ": empty " + what);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size())
    throw DataFormatError("line " + std::to_string(line_no) + ": cannot parse " +
                          what + " '" + s + "'");
  return v;
}

inline int parse_indicator(const std::string& field, std::size_t line_no,
                           const std::string& what) {
  const std::string s = trimmed(field);
  if (s == "0") return 0;
  if (s == "1") return 1;
  throw DataFormatError("line " + std::to_string(line_no) + ": " + what +
                        " must be 0 or 1, got '" + s + "'");
}

inline std::string format_value(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Checks the per-subject invariants shared by the loader and the
// generator. `where` prefixes error messages.
inline void validate_observation(const IntervalObservation& obs,
                                 const std::string& where) {
  if (!(obs.left >= 0.0) || !std::isfinite(obs.left))
    throw DataFormatError(where + ": left endpoint must be finite and >= 0");
  if (!(obs.right > obs.left))
    throw DataFormatError(where + ": interval must satisfy left < right");
  if (obs.left == 0.0 && std::isinf(obs.right))
    throw DataFormatError(where + ": interval (0, inf) carries no information");
  if (obs.sampled != (obs.in_subcohort || obs.selected_case))
    throw DataFormatError(where + ": sampled flag must equal max(subcohort, selected case)");
  if (obs.selected_case && !obs.is_case())
    throw DataFormatError(where + ": selected-case flag set on a non-failure");
  if (obs.selected_case && obs.in_subcohort)
    throw DataFormatError(where + ": selected-case flag set inside the subcohort");
  if (obs.sampled != obs.expensive.has_value())
    throw DataFormatError(where + ": phase-two covariates must be present exactly when sampled");
}

/**
 * Reads the cohort CSV. The header fixes the schema:
 *   id,left,right,xi,eta,zeta[,z:<name>...][,xstar:<name>...][,x:<name>...]
 * `right` accepts `inf` for right-censored subjects. Phase-two (x:) fields
 * must be empty exactly on the unsampled rows. Violations raise
 * DataFormatError naming the offending line.
 */
inline CohortDataset load_dataset_csv(const std::string& path,
                                      const SamplingDesign& design) {
  std::ifstream in(path);
  if (!in) throw DataFormatError("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line))
    throw DataFormatError("'" + path + "' is empty");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> fixed = {"id", "left", "right", "xi", "eta", "zeta"};
  if (header.size() < fixed.size())
    throw DataFormatError("header must start with id,left,right,xi,eta,zeta");
  for (std::size_t i = 0; i < fixed.size(); ++i)
    if (detail::trimmed(header[i]) != fixed[i])
      throw DataFormatError("header column " + std::to_string(i + 1) +
                            " must be '" + fixed[i] + "'");

  CohortDataset data;
  data.design = design;
  // Covariate groups must appear in z:, xstar:, x: order.
  std::size_t group = 0;
  for (std::size_t i = fixed.size(); i < header.size(); ++i) {
    const std::string col = detail::trimmed(header[i]);
    std::size_t g;
    if (col.rfind("z:", 0) == 0) g = 0;
    else if (col.rfind("xstar:", 0) == 0) g = 1;
    else if (col.rfind("x:", 0) == 0) g = 2;
    else throw DataFormatError("header column '" + col +
                               "' must be prefixed z:, xstar: or x:");
    if (g < group)
      throw DataFormatError("covariate groups must appear in z:, xstar:, x: order");
    group = g;
    const std::string name = col.substr(col.find(':') + 1);
    if (name.empty())
      throw DataFormatError("covariate column '" + col + "' is missing a name");
    (g == 0 ? data.cheap_names : g == 1 ? data.aux_names : data.expensive_names)
        .push_back(name);
  }

  const std::size_t n_cheap = data.cheap_names.size();
  const std::size_t n_aux = data.aux_names.size();
  const std::size_t n_exp = data.expensive_names.size();
  const std::size_t n_cols = fixed.size() + n_cheap + n_aux + n_exp;

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trimmed(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != n_cols)
      throw DataFormatError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(n_cols) + " fields, got " +
                            std::to_string(f.size()));
    IntervalObservation obs;
    obs.id = detail::trimmed(f[0]);
    if (obs.id.empty())
      throw DataFormatError("line " + std::to_string(line_no) + ": empty id");
    obs.left = detail::parse_number(f[1], line_no, "left endpoint");
    obs.right = detail::parse_number(f[2], line_no, "right endpoint");
    obs.sampled = detail::parse_indicator(f[3], line_no, "xi") != 0;
    obs.in_subcohort = detail::parse_indicator(f[4], line_no, "eta") != 0;
    obs.selected_case = detail::parse_indicator(f[5], line_no, "zeta") != 0;

    std::size_t c = fixed.size();
    obs.cheap.reserve(n_cheap);
    for (std::size_t j = 0; j < n_cheap; ++j)
      obs.cheap.push_back(detail::parse_number(f[c++], line_no, "z value"));
    obs.aux.reserve(n_aux);
    for (std::size_t j = 0; j < n_aux; ++j)
      obs.aux.push_back(detail::parse_number(f[c++], line_no, "xstar value"));

    bool any_x = false, all_x = n_exp > 0;
    std::vector<double> xv;
    xv.reserve(n_exp);
    for (std::size_t j = 0; j < n_exp; ++j) {
      const std::string s = detail::trimmed(f[c++]);
      if (s.empty()) {
        all_x = false;
      } else {
        any_x = true;
        xv.push_back(detail::parse_number(s, line_no, "x value"));
      }
    }
    if (obs.sampled && n_exp > 0 && !all_x)
      throw DataFormatError("line " + std::to_string(line_no) +
                            ": sampled row is missing phase-two values");
    if (!obs.sampled && any_x)
      throw DataFormatError("line " + std::to_string(line_no) +
                            ": unsampled row carries phase-two values");
    if (obs.sampled) obs.expensive = std::move(xv);

    validate_observation(obs, "line " + std::to_string(line_no));
    data.subjects.push_back(std::move(obs));
  }
  if (data.subjects.empty())
    throw DataFormatError("'" + path + "' holds no subjects");
  return data;
}

inline void write_dataset_csv(const CohortDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataFormatError("cannot write '" + path + "'");
  out << "id,left,right,xi,eta,zeta";
  for (const auto& n : data.cheap_names) out << ",z:" << n;
  for (const auto& n : data.aux_names) out << ",xstar:" << n;
  for (const auto& n : data.expensive_names) out << ",x:" << n;
  out << "\n";
  for (const auto& s : data.subjects) {
    out << s.id << ',' << detail::format_value(s.left) << ','
        << detail::format_value(s.right) << ',' << (s.sampled ? 1 : 0) << ','
        << (s.in_subcohort ? 1 : 0) << ',' << (s.selected_case ? 1 : 0);
    for (double v : s.cheap) out << ',' << detail::format_value(v);
    for (double v : s.aux) out << ',' << detail::format_value(v);
    for (std::size_t j = 0; j < data.expensive_names.size(); ++j) {
      out << ',';
      if (s.expensive) out << detail::format_value((*s.expensive)[j]);
    }
    out << "\n";
  }
}

}  // namespace casecohort
