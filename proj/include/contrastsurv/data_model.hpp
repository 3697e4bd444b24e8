#pragma once

#include <zlib.h>

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "contrastsurv/error.hpp"
#include "contrastsurv/textio.hpp"

namespace contrastsurv {

enum class Scale { RawCount, RPKM, Log2 };

inline std::string scale_name(Scale s) {
  switch (s) {
    case Scale::RawCount: return "RawCount";
    case Scale::RPKM: return "RPKM";
    case Scale::Log2: return "Log2";
  }
  return "RawCount";
}

inline Scale scale_from_name(const std::string& name) {
  if (name == "RawCount") return Scale::RawCount;
  if (name == "RPKM") return Scale::RPKM;
  if (name == "Log2") return Scale::Log2;
  throw ValidationError("unknown scale marker '" + name + "'");
}

// Dense samples x genes expression matrix.
struct ExpressionMatrix {
  std::vector<std::string> sample_ids;
  std::vector<std::string> gene_ids;
  Eigen::MatrixXd values;  // n_samples x n_genes
  Scale scale = Scale::RawCount;

  Eigen::Index n_samples() const { return values.rows(); }
  Eigen::Index n_genes() const { return values.cols(); }
};

// Per-sample event time (days) and event indicator (1 = event, 0 = censored).
struct ClinicalTable {
  std::vector<std::string> sample_ids;
  Eigen::VectorXd time;
  std::vector<int> event;

  Eigen::Index size() const { return time.size(); }
};

struct NormalizationFactor {
  std::vector<std::string> reference_genes;  // genes actually used
  double e_target = 0.0;
  double e_cohort = 0.0;
  double factor = 0.0;
};

struct AlignReport {
  int matched = 0;
  int missing = 0;  // in reference but not in cohort, filled with zeros
  int dropped = 0;  // in cohort but not in reference
  std::vector<std::string> missing_genes;
  std::vector<std::string> dropped_genes;
};

struct CohortDataset {
  ExpressionMatrix expression;  // scale must be Log2
  ClinicalTable clinical;       // same sample order as expression
  std::string cancer_type;
};

struct JoinReport {
  std::vector<std::string> dropped_samples;  // expression samples without usable clinical row
};

namespace detail {

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline std::string read_text_file(const std::string& path) {
  if (ends_with(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (f == nullptr) throw ValidationError("cannot open file: " + path);
    std::string out;
    char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
    const bool bad = n < 0;
    gzclose(f);
    if (bad) throw Error("gzip read error: " + path);
    return out;
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline void check_unique(const std::vector<std::string>& ids, const char* what) {
  std::unordered_set<std::string> seen;
  seen.reserve(ids.size());
  for (const auto& id : ids) {
    if (!seen.insert(id).second)
      throw ValidationError(std::string("duplicate ") + what + " '" + id + "'");
  }
}

}  // namespace detail

enum class Orientation { GenesAsRows, SamplesAsRows };

// TSV layout: optional "# scale: <name>" first line, then a header row of
// identifiers, then one row per gene (or per sample). Gzip input is accepted
// transparently via the .gz suffix.
inline ExpressionMatrix load_expression_tsv(const std::string& path, Orientation orientation) {
  const std::string text = detail::read_text_file(path);
  std::vector<std::string_view> lines;
  {
    std::string_view sv(text);
    std::size_t start = 0;
    while (start < sv.size()) {
      std::size_t pos = sv.find('\n', start);
      if (pos == std::string_view::npos) pos = sv.size();
      std::string_view line = sv.substr(start, pos - start);
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (!line.empty()) lines.push_back(line);
      start = pos + 1;
    }
  }
  if (lines.empty()) throw ValidationError("empty expression file: " + path);

  Scale scale = Scale::RawCount;
  std::size_t first = 0;
  if (lines[0].substr(0, 1) == "#") {
    std::string header(lines[0]);
    const auto pos = header.find("scale:");
    if (pos != std::string::npos) {
      std::string name = header.substr(pos + 6);
      name.erase(0, name.find_first_not_of(" \t"));
      name.erase(name.find_last_not_of(" \t") + 1);
      scale = scale_from_name(name);
    }
    first = 1;
  }
  if (lines.size() <= first) throw ValidationError("expression file has no header row: " + path);

  const auto header_cells = detail::split_tabs(lines[first]);
  if (header_cells.size() < 2)
    throw ValidationError("expression header needs at least one identifier column: " + path);

  std::vector<std::string> col_ids(header_cells.begin() + 1, header_cells.end());
  std::vector<std::string> row_ids;
  const std::size_t n_cols = col_ids.size();
  const std::size_t n_rows = lines.size() - first - 1;
  if (n_rows == 0) throw ValidationError("expression file has no data rows: " + path);

  Eigen::MatrixXd raw(static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(n_cols));
  row_ids.reserve(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r) {
    const auto cells = detail::split_tabs(lines[first + 1 + r]);
    if (cells.size() != n_cols + 1) {
      throw ValidationError("row " + std::to_string(r + 1) + " has " +
                            std::to_string(cells.size()) + " cells, expected " +
                            std::to_string(n_cols + 1) + ": " + path);
    }
    row_ids.emplace_back(cells[0]);
    for (std::size_t c = 0; c < n_cols; ++c) {
      raw(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          detail::parse_double(cells[c + 1], static_cast<int>(r + 1), static_cast<int>(c + 1));
    }
  }

  ExpressionMatrix m;
  m.scale = scale;
  if (orientation == Orientation::GenesAsRows) {
    m.gene_ids = std::move(row_ids);
    m.sample_ids = std::move(col_ids);
    m.values = raw.transpose();
  } else {
    m.sample_ids = std::move(row_ids);
    m.gene_ids = std::move(col_ids);
    m.values = std::move(raw);
  }
  detail::check_unique(m.gene_ids, "gene id");
  detail::check_unique(m.sample_ids, "sample id");
  return m;
}

inline void write_expression_tsv(const ExpressionMatrix& m, const std::string& path,
                                 Orientation orientation = Orientation::GenesAsRows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out << "# scale: " << scale_name(m.scale) << "\n";
  if (orientation == Orientation::GenesAsRows) {
    out << "gene_id";
    for (const auto& s : m.sample_ids) out << '\t' << s;
    out << '\n';
    for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
      out << m.gene_ids[static_cast<std::size_t>(g)];
      for (Eigen::Index s = 0; s < m.n_samples(); ++s)
        out << '\t' << detail::format_double(m.values(s, g));
      out << '\n';
    }
  } else {
    out << "sample_id";
    for (const auto& g : m.gene_ids) out << '\t' << g;
    out << '\n';
    for (Eigen::Index s = 0; s < m.n_samples(); ++s) {
      out << m.sample_ids[static_cast<std::size_t>(s)];
      for (Eigen::Index g = 0; g < m.n_genes(); ++g)
        out << '\t' << detail::format_double(m.values(s, g));
      out << '\n';
    }
  }
  if (!out) throw Error("write failed: " + path);
}

// Clinical TSV with columns sample_id, time_days, event. Rows with an empty
// or NA time/event are dropped (missing follow-up); their ids are returned.
inline ClinicalTable load_clinical_tsv(const std::string& path,
                                       std::vector<std::string>* missing_out = nullptr) {
  const std::string text = detail::read_text_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty clinical file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_tabs(line);
  int c_id = -1, c_time = -1, c_event = -1;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == "sample_id") c_id = static_cast<int>(i);
    if (header[i] == "time_days") c_time = static_cast<int>(i);
    if (header[i] == "event") c_event = static_cast<int>(i);
  }
  if (c_id < 0) throw ValidationError("clinical file missing column 'sample_id': " + path);
  if (c_time < 0) throw ValidationError("clinical file missing column 'time_days': " + path);
  if (c_event < 0) throw ValidationError("clinical file missing column 'event': " + path);

  std::vector<std::string> ids;
  std::vector<double> times;
  std::vector<int> events;
  int row = 0;
  auto is_na = [](std::string_view v) { return v.empty() || v == "NA" || v == "na" || v == "NaN"; };
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    const auto cells = detail::split_tabs(line);
    if (cells.size() <= static_cast<std::size_t>(std::max({c_id, c_time, c_event})))
      throw ValidationError("clinical row " + std::to_string(row) + " is short: " + path);
    const std::string id(cells[static_cast<std::size_t>(c_id)]);
    const auto t_cell = cells[static_cast<std::size_t>(c_time)];
    const auto e_cell = cells[static_cast<std::size_t>(c_event)];
    if (is_na(t_cell) || is_na(e_cell)) {
      if (missing_out != nullptr) missing_out->push_back(id);
      continue;
    }
    const double t = detail::parse_double(t_cell, row, c_time + 1);
    const double e = detail::parse_double(e_cell, row, c_event + 1);
    if (!(t >= 0.0) || !std::isfinite(t))
      throw ValidationError("negative or non-finite time for sample '" + id + "'");
    if (e != 0.0 && e != 1.0)
      throw ValidationError("event must be 0 or 1 for sample '" + id + "'");
    ids.push_back(id);
    times.push_back(t);
    events.push_back(static_cast<int>(e));
  }
  detail::check_unique(ids, "sample id");
  ClinicalTable table;
  table.sample_ids = std::move(ids);
  table.time = Eigen::Map<Eigen::VectorXd>(times.data(), static_cast<Eigen::Index>(times.size()));
  table.event = std::move(events);
  return table;
}

inline void write_clinical_tsv(const ClinicalTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write file: " + path);
  out << "sample_id\ttime_days\tevent\n";
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    out << t.sample_ids[static_cast<std::size_t>(i)] << '\t'
        << detail::format_double(t.time(i)) << '\t' << t.event[static_cast<std::size_t>(i)]
        << '\n';
  }
  if (!out) throw Error("write failed: " + path);
}

inline ExpressionMatrix log2_transform(const ExpressionMatrix& m) {
  if (m.scale == Scale::Log2)
    throw ValidationError("matrix is already log2-transformed");
  for (Eigen::Index s = 0; s < m.n_samples(); ++s) {
    for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
      if (m.values(s, g) < 0.0)
        throw ValidationError("negative expression value for gene '" +
                              m.gene_ids[static_cast<std::size_t>(g)] +
                              "'; drop negative genes before transforming");
    }
  }
  ExpressionMatrix out = m;
  out.values = (m.values.array() + 1.0).log() / std::log(2.0);
  out.scale = Scale::Log2;
  return out;
}

inline ExpressionMatrix rpkm_to_counts(const ExpressionMatrix& m,
                                       const std::map<std::string, double>& gene_lengths) {
  if (m.scale != Scale::RPKM) throw ValidationError("rpkm_to_counts expects an RPKM matrix");
  std::vector<std::string> missing;
  Eigen::VectorXd lengths(m.n_genes());
  for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
    const auto& id = m.gene_ids[static_cast<std::size_t>(g)];
    const auto it = gene_lengths.find(id);
    if (it == gene_lengths.end() || !(it->second > 0.0)) {
      missing.push_back(id);
      continue;
    }
    lengths(g) = it->second;
  }
  if (!missing.empty()) {
    std::string msg = "missing gene length for:";
    for (const auto& id : missing) msg += " " + id;
    throw ValidationError(msg);
  }
  ExpressionMatrix out = m;
  out.values = m.values.array().rowwise() * lengths.transpose().array();
  out.scale = Scale::RawCount;
  return out;
}

// Rescales the whole cohort so that the mean expression of the reference
// genes matches e_target. The cohort mean is the grand mean over all
// (reference gene, sample) cells.
inline std::pair<ExpressionMatrix, NormalizationFactor> housekeeping_normalize(
    const ExpressionMatrix& cohort, const std::vector<std::string>& reference_genes,
    double e_target) {
  if (cohort.scale != Scale::RawCount)
    throw ValidationError("housekeeping_normalize expects raw counts");
  std::vector<Eigen::Index> cols;
  std::vector<std::string> used;
  for (const auto& ref : reference_genes) {
    const auto it = std::find(cohort.gene_ids.begin(), cohort.gene_ids.end(), ref);
    if (it != cohort.gene_ids.end()) {
      cols.push_back(static_cast<Eigen::Index>(it - cohort.gene_ids.begin()));
      used.push_back(ref);
    }
  }
  if (cols.empty())
    throw ValidationError("none of the reference genes are present in the cohort");
  double sum = 0.0;
  for (const auto c : cols) sum += cohort.values.col(c).sum();
  const double e_cohort = sum / (static_cast<double>(cols.size()) *
                                 static_cast<double>(cohort.n_samples()));
  if (!(e_cohort > 0.0))
    throw ValidationError("reference gene mean is zero; cohort is degenerate");

  NormalizationFactor f;
  f.reference_genes = std::move(used);
  f.e_target = e_target;
  f.e_cohort = e_cohort;
  f.factor = e_target / e_cohort;

  ExpressionMatrix out = cohort;
  out.values *= f.factor;
  return {std::move(out), std::move(f)};
}

// Reorders columns to reference_gene_order. Genes absent from the cohort
// become zero columns; cohort genes not in the reference are dropped.
inline std::pair<ExpressionMatrix, AlignReport> align_genes(
    const ExpressionMatrix& cohort, const std::vector<std::string>& reference_gene_order) {
  std::unordered_map<std::string, Eigen::Index> index;
  index.reserve(cohort.gene_ids.size());
  for (std::size_t g = 0; g < cohort.gene_ids.size(); ++g)
    index.emplace(cohort.gene_ids[g], static_cast<Eigen::Index>(g));

  ExpressionMatrix out;
  out.sample_ids = cohort.sample_ids;
  out.gene_ids = reference_gene_order;
  out.scale = cohort.scale;
  out.values = Eigen::MatrixXd::Zero(cohort.n_samples(),
                                     static_cast<Eigen::Index>(reference_gene_order.size()));
  AlignReport report;
  std::unordered_set<std::string> kept;
  for (std::size_t g = 0; g < reference_gene_order.size(); ++g) {
    const auto it = index.find(reference_gene_order[g]);
    if (it == index.end()) {
      ++report.missing;
      report.missing_genes.push_back(reference_gene_order[g]);
    } else {
      out.values.col(static_cast<Eigen::Index>(g)) = cohort.values.col(it->second);
      ++report.matched;
      kept.insert(reference_gene_order[g]);
    }
  }
  for (const auto& g : cohort.gene_ids) {
    if (kept.find(g) == kept.end()) {
      ++report.dropped;
      report.dropped_genes.push_back(g);
    }
  }
  return {std::move(out), std::move(report)};
}

// Removes genes with any negative value, cohort-wide.
inline std::pair<ExpressionMatrix, std::vector<std::string>> drop_negative_genes(
    const ExpressionMatrix& m) {
  std::vector<Eigen::Index> keep;
  std::vector<std::string> dropped;
  for (Eigen::Index g = 0; g < m.n_genes(); ++g) {
    if ((m.values.col(g).array() < 0.0).any())
      dropped.push_back(m.gene_ids[static_cast<std::size_t>(g)]);
    else
      keep.push_back(g);
  }
  if (dropped.empty()) return {m, {}};
  ExpressionMatrix out;
  out.sample_ids = m.sample_ids;
  out.scale = m.scale;
  out.values.resize(m.n_samples(), static_cast<Eigen::Index>(keep.size()));
  out.gene_ids.reserve(keep.size());
  for (std::size_t i = 0; i < keep.size(); ++i) {
    out.gene_ids.push_back(m.gene_ids[static_cast<std::size_t>(keep[i])]);
    out.values.col(static_cast<Eigen::Index>(i)) = m.values.col(keep[i]);
  }
  return {std::move(out), std::move(dropped)};
}

// Joins expression and clinical rows on sample id, keeping expression order.
// Expression samples without a clinical row are dropped and reported.
inline std::pair<CohortDataset, JoinReport> join_cohort(const ExpressionMatrix& expression,
                                                        const ClinicalTable& clinical,
                                                        const std::string& cancer_type) {
  std::unordered_map<std::string, Eigen::Index> clin_index;
  for (std::size_t i = 0; i < clinical.sample_ids.size(); ++i)
    clin_index.emplace(clinical.sample_ids[i], static_cast<Eigen::Index>(i));

  std::vector<Eigen::Index> expr_rows;
  std::vector<Eigen::Index> clin_rows;
  JoinReport report;
  for (std::size_t s = 0; s < expression.sample_ids.size(); ++s) {
    const auto it = clin_index.find(expression.sample_ids[s]);
    if (it == clin_index.end()) {
      report.dropped_samples.push_back(expression.sample_ids[s]);
    } else {
      expr_rows.push_back(static_cast<Eigen::Index>(s));
      clin_rows.push_back(it->second);
    }
  }
  if (expr_rows.empty()) throw ValidationError("no samples shared between expression and clinical data");

  CohortDataset ds;
  ds.cancer_type = cancer_type;
  ds.expression.gene_ids = expression.gene_ids;
  ds.expression.scale = expression.scale;
  ds.expression.values.resize(static_cast<Eigen::Index>(expr_rows.size()), expression.n_genes());
  ds.clinical.time.resize(static_cast<Eigen::Index>(expr_rows.size()));
  for (std::size_t i = 0; i < expr_rows.size(); ++i) {
    ds.expression.sample_ids.push_back(expression.sample_ids[static_cast<std::size_t>(expr_rows[i])]);
    ds.expression.values.row(static_cast<Eigen::Index>(i)) = expression.values.row(expr_rows[i]);
    ds.clinical.sample_ids.push_back(clinical.sample_ids[static_cast<std::size_t>(clin_rows[i])]);
    ds.clinical.time(static_cast<Eigen::Index>(i)) = clinical.time(clin_rows[i]);
    ds.clinical.event.push_back(clinical.event[static_cast<std::size_t>(clin_rows[i])]);
  }
  return {std::move(ds), std::move(report)};
}

}  // namespace contrastsurv
