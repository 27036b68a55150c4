#include "det/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace det {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

bool parse_number(std::string_view s, double& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::string shortest(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& name, const std::string& value) {
  double v = 0.0;
  if (!parse_number(value, v) || std::isnan(v)) throw DataError("parameter " + name + ": not a number: '" + value + "'");
  return v;
}

int to_int(const std::string& name, const std::string& value) {
  const double v = to_double(name, value);
  if (v != std::floor(v) || std::abs(v) > 2e9) throw DataError("parameter " + name + ": expected an integer: '" + value + "'");
  return static_cast<int>(v);
}

struct ParamSlot {
  std::function<void(HyperParams&, const std::string&)> set;
  std::function<std::optional<std::string>(const HyperParams&)> get;
};

template <typename T>
ParamSlot real_slot(const std::string& name, T HyperParams::*field) {
  return {[name, field](HyperParams& p, const std::string& v) { p.*field = to_double(name, v); },
          [field](const HyperParams& p) { return std::optional<std::string>(shortest(p.*field)); }};
}

ParamSlot int_slot(const std::string& name, int HyperParams::*field) {
  return {[name, field](HyperParams& p, const std::string& v) { p.*field = to_int(name, v); },
          [field](const HyperParams& p) { return std::optional<std::string>(std::to_string(p.*field)); }};
}

ParamSlot opt_int_slot(const std::string& name, std::optional<int> HyperParams::*field) {
  return {[name, field](HyperParams& p, const std::string& v) {
            if (v == "none" || v == "-") p.*field = std::nullopt;
            else p.*field = to_int(name, v);
          },
          [field](const HyperParams& p) {
            return (p.*field) ? std::optional<std::string>(std::to_string(*(p.*field))) : std::nullopt;
          }};
}

ParamSlot opt_real_slot(const std::string& name, std::optional<double> HyperParams::*field) {
  return {[name, field](HyperParams& p, const std::string& v) {
            if (v == "none" || v == "-") p.*field = std::nullopt;
            else p.*field = to_double(name, v);
          },
          [field](const HyperParams& p) {
            return (p.*field) ? std::optional<std::string>(shortest(*(p.*field))) : std::nullopt;
          }};
}

const std::vector<std::pair<std::string, ParamSlot>>& slots() {
  static const std::vector<std::pair<std::string, ParamSlot>> table = {
      {"lambda", real_slot("lambda", &HyperParams::lambda)},
      {"omega", real_slot("omega", &HyperParams::omega)},
      {"gamma", real_slot("gamma", &HyperParams::gamma)},
      {"beta", real_slot("beta", &HyperParams::beta)},
      {"tau", real_slot("tau", &HyperParams::tau)},
      {"eta", real_slot("eta", &HyperParams::eta)},
      {"kappa", real_slot("kappa", &HyperParams::kappa)},
      {"J", opt_int_slot("J", &HyperParams::p_rank)},
      {"K", opt_int_slot("K", &HyperParams::g_rank)},
      {"M_prime", opt_int_slot("M_prime", &HyperParams::source_samples)},
      {"N_prime", opt_int_slot("N_prime", &HyperParams::target_samples)},
      {"lambda_g", real_slot("lambda_g", &HyperParams::lambda_g)},
      {"epsilon", real_slot("epsilon", &HyperParams::epsilon)},
      {"cell_size", opt_real_slot("cell_size", &HyperParams::cell_size)},
      {"knn_k", int_slot("knn_k", &HyperParams::knn_k)},
      {"feature_weight", opt_real_slot("feature_weight", &HyperParams::feature_weight)},
      {"radius_factor", real_slot("radius_factor", &HyperParams::radius_factor)},
      {"max_iter", int_slot("max_iter", &HyperParams::max_iter)},
      {"conv_tol", real_slot("conv_tol", &HyperParams::conv_tol)},
  };
  return table;
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Table read_table(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  const std::string name = path.string();
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  Table table;
  char delim = ',';
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    if (table.header.empty()) {
      delim = line.find('\t') != std::string::npos ? '\t' : ',';
      for (auto cell : split(line, delim)) {
        if (cell.empty()) throw DataError(name + ":" + std::to_string(line_no) + ": empty header cell");
        table.header.emplace_back(cell);
      }
      continue;
    }
    const auto cells = split(line, delim);
    if (cells.size() != table.header.size())
      throw DataError(name + ":" + std::to_string(line_no) + ": expected " + std::to_string(table.header.size()) +
                      " columns, found " + std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!parse_number(cells[c], row[c]))
        throw DataError(name + ":" + std::to_string(line_no) + ": non-numeric cell '" + std::string(cells[c]) +
                        "' in column " + table.header[c]);
      if (!std::isfinite(row[c]))
        throw DataError(name + ":" + std::to_string(line_no) + ": non-finite value in column " + table.header[c]);
    }
    rows.push_back(std::move(row));
  }
  if (table.header.empty()) throw DataError(name + ": missing header row");
  table.values.resize(static_cast<Index>(table.header.size()), static_cast<Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      table.values(static_cast<Index>(c), static_cast<Index>(r)) = rows[r][c];
  return table;
}

void write_table(const std::filesystem::path& path, const Table& table, char delimiter) {
  if (static_cast<Index>(table.header.size()) != table.values.rows()) throw DataError("table header size mismatch");
  std::string out;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (c) out += delimiter;
    out += table.header[c];
  }
  out += '\n';
  for (Index r = 0; r < table.values.cols(); ++r) {
    for (Index c = 0; c < table.values.rows(); ++c) {
      if (c) out += delimiter;
      out += format_double(table.values(c, r));
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

DiscretizedFunction load_function(const std::filesystem::path& path) {
  const Table table = read_table(path);
  Index dim = 0, fdim = 0;
  for (const auto& h : table.header) {
    const bool is_x = h.size() > 1 && h[0] == 'x';
    const bool is_f = h.size() > 1 && h[0] == 'f';
    if (is_x && fdim == 0 && h == "x" + std::to_string(dim + 1)) ++dim;
    else if (is_f && h == "f" + std::to_string(fdim + 1)) ++fdim;
    else throw DataError(path.string() + ":1: unexpected column '" + h + "' (expected x1..xD then f1..fD')");
  }
  if (dim < 1) throw DataError(path.string() + ":1: no coordinate columns");
  if (fdim < 1) throw DataError(path.string() + ":1: no feature columns");
  DiscretizedFunction fn{table.values.topRows(dim), table.values.bottomRows(fdim)};
  if (fn.size() < 1) throw DataError(path.string() + ": no data rows");
  return fn;
}

void save_function(const std::filesystem::path& path, const DiscretizedFunction& fn, char delimiter) {
  Table table;
  for (Index d = 0; d < fn.dim(); ++d) table.header.push_back("x" + std::to_string(d + 1));
  for (Index d = 0; d < fn.feature_dim(); ++d) table.header.push_back("f" + std::to_string(d + 1));
  table.values.resize(fn.dim() + fn.feature_dim(), fn.size());
  table.values.topRows(fn.dim()) = fn.points;
  table.values.bottomRows(fn.feature_dim()) = fn.features;
  write_table(path, table, delimiter);
}

std::string format_transform(const SimilarityTransform& t) {
  std::string out = "s " + format_double(t.s) + "\nR";
  for (Index i = 0; i < t.R.rows(); ++i)
    for (Index j = 0; j < t.R.cols(); ++j) out += " " + format_double(t.R(i, j));
  out += "\nt";
  for (Index i = 0; i < t.t.size(); ++i) out += " " + format_double(t.t(i));
  out += "\n";
  return out;
}

SimilarityTransform parse_transform(std::string_view text) {
  std::map<std::string, std::vector<double>> fields;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    std::string tok;
    auto& vals = fields[key];
    while (ls >> tok) {
      double v = 0.0;
      if (!parse_number(tok, v)) throw DataError("transform record: bad number '" + tok + "'");
      vals.push_back(v);
    }
  }
  if (!fields.contains("s") || !fields.contains("R") || !fields.contains("t") || fields["s"].size() != 1)
    throw DataError("transform record needs s, R and t lines");
  const auto dim = static_cast<Index>(fields["t"].size());
  if (dim < 1 || static_cast<Index>(fields["R"].size()) != dim * dim)
    throw DataError("transform record: R and t sizes disagree");
  SimilarityTransform t;
  t.s = fields["s"][0];
  t.R.resize(dim, dim);
  for (Index i = 0; i < dim; ++i)
    for (Index j = 0; j < dim; ++j) t.R(i, j) = fields["R"][static_cast<std::size_t>(i * dim + j)];
  t.t = Eigen::Map<const Vector>(fields["t"].data(), dim);
  return t;
}

const std::vector<std::string>& param_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [name, slot] : slots()) out.push_back(name);
    return out;
  }();
  return names;
}

void set_param(HyperParams& params, const std::string& name, const std::string& value) {
  for (const auto& [key, slot] : slots()) {
    if (key == name) {
      slot.set(params, std::string(trim(value)));
      return;
    }
  }
  throw DataError("unknown parameter '" + name + "'");
}

std::vector<std::pair<std::string, std::string>> param_entries(const HyperParams& params) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [key, slot] : slots())
    if (auto v = slot.get(params)) out.emplace_back(key, *v);
  return out;
}

std::string serialize_schedule(const StageSchedule& schedule) {
  std::string out;
  for (std::size_t l = 0; l < schedule.stages.size(); ++l) {
    const Stage& st = schedule.stages[l];
    if (l) out += '\n';
    out += "[stage]\n";
    out += std::string("mode = ") + (st.mode == StageMode::rigid ? "rigid" : "nonrigid") + "\n";
    if (st.pin_displacement) out += "pin_displacement = true\n";
    for (const auto& [k, v] : param_entries(st.params)) out += k + " = " + v + "\n";
  }
  return out;
}

StageSchedule parse_schedule(std::string_view text) {
  StageSchedule schedule;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = trim(line.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "schedule line " + std::to_string(line_no) + ": ";
    if (line == "[stage]") {
      schedule.stages.emplace_back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw DataError(where + "expected key = value");
    if (schedule.stages.empty()) throw DataError(where + "setting outside a [stage] section");
    const std::string key(trim(line.substr(0, eq)));
    const std::string value(trim(line.substr(eq + 1)));
    Stage& st = schedule.stages.back();
    try {
      if (key == "mode") {
        if (value == "rigid") st.mode = StageMode::rigid;
        else if (value == "nonrigid") st.mode = StageMode::nonrigid;
        else throw DataError("mode must be rigid or nonrigid");
      } else if (key == "pin_displacement") {
        if (value != "true" && value != "false") throw DataError("pin_displacement must be true or false");
        st.pin_displacement = value == "true";
      } else {
        set_param(st.params, key, value);
      }
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
  }
  if (schedule.stages.empty()) throw DataError("schedule has no [stage] sections");
  return schedule;
}

}  // namespace det
