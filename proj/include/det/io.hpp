// Delimited text tables, transform records and plain-text schedule configs.
#pragma once

#include "det/core.hpp"
#include "det/pipeline.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace det {

/// Malformed or missing input files.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A numeric table with a header row. Rows of the matrix are columns of the file.
struct Table {
  std::vector<std::string> header;
  Matrix values;  // columns x rows-of-file
};

/// Reads a comma- or tab-delimited table (delimiter detected from the header).
/// Rejects NaN/Inf, ragged rows and non-numeric cells, citing the line number.
Table read_table(const std::filesystem::path& path);
void write_table(const std::filesystem::path& path, const Table& table, char delimiter = ',');

/// Header x1..xD, f1..fD'.
DiscretizedFunction load_function(const std::filesystem::path& path);
void save_function(const std::filesystem::path& path, const DiscretizedFunction& fn, char delimiter = ',');

/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

/// "%.17g": enough digits for an exact round trip.
std::string format_double(double v);

/// Three lines: "s <scale>", "R <row-major entries>", "t <entries>".
std::string format_transform(const SimilarityTransform& t);
SimilarityTransform parse_transform(std::string_view text);

/// Sets a hyperparameter from its config/flag name (lambda, omega, gamma, beta,
/// tau, eta, kappa, J, K, M_prime, N_prime, lambda_g, epsilon, cell_size, knn_k,
/// feature_weight, radius_factor, max_iter, conv_tol).
void set_param(HyperParams& params, const std::string& name, const std::string& value);
/// Every hyperparameter as (name, value) in a fixed order; unset optionals are skipped.
std::vector<std::pair<std::string, std::string>> param_entries(const HyperParams& params);
const std::vector<std::string>& param_names();

/// One "[stage]" section per stage, key = value lines, '#' comments.
std::string serialize_schedule(const StageSchedule& schedule);
StageSchedule parse_schedule(std::string_view text);

}  // namespace det
