#pragma once

#include "hybrid/realization.hpp"

#include <json.hpp>

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace hybrid {

using Json = nlohmann::json;

// Tensor file format: {"shape": [ints], "data": [row-major numbers]}.

Json tensor_to_json(const MatrixXd& m);
Json tensor_to_json(const VectorXd& v);
Json tensor_to_json(const std::vector<MatrixXd>& stack);  // shape [count, rows, cols]

/// Reads a rank-1 or rank-2 tensor; rank-1 tensors come back as a column.
MatrixXd tensor_from_json(const Json& j);

/// Reads a rank-3 tensor into a list of matrices.
std::vector<MatrixXd> tensor_stack_from_json(const Json& j);

void write_json(const std::filesystem::path& path, const Json& j);
Json read_json(const std::filesystem::path& path);

/// Realization as tensors A [T,n,n], B [T,n], C [T,n], D [T] plus a manifest.
Json realization_to_json(const Realization& R);
Realization realization_from_json(const Json& j);

/// 64-bit FNV-1a of a string, hex encoded.
std::string fnv1a_hex(const std::string& text);

/// CSV writer that emits a leading comment line and shortest round-trip numbers.
class CsvWriter {
 public:
  CsvWriter(std::ostream& out, const std::string& comment, const std::vector<std::string>& header);

  template <typename... Fields>
  void row(const Fields&... fields) {
    bool first = true;
    ((write_field(fields, first)), ...);
    out_ << '\n';
  }

 private:
  void separator(bool& first) {
    if (!first) out_ << ',';
    first = false;
  }
  void write_field(double x, bool& first);
  void write_field(const std::string& s, bool& first);
  void write_field(const char* s, bool& first) { write_field(std::string(s), first); }
  template <typename Int>
    requires std::is_integral_v<Int>
  void write_field(Int x, bool& first) {
    separator(first);
    out_ << x;
  }

  std::ostream& out_;
};

std::string format_double(double x);

}  // namespace hybrid
