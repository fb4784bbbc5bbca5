#pragma once

#include "fmrc/dynamics.hpp"

#include <json.hpp>

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fmrc::io {

// FMRC1 container:
//   "FMRC" | u32 version = 1 | u32 kind | u64 rows | u32 dim | u32 lag
//   | rows x width little-endian f64 (row-major) | u64 json_length | json
// width = dim for trajectories and 2*dim (x then y) for pair sets.
enum class RecordKind : std::uint32_t { Trajectory = 0, Pairs = 1 };

struct Fmrc1Record {
  RecordKind kind = RecordKind::Trajectory;
  std::uint32_t dim = 0;
  std::uint32_t lag = 0;
  Eigen::MatrixXd rows;
  nlohmann::json metadata = nlohmann::json::object();
};

std::string encode_fmrc1(const Fmrc1Record& record);
Fmrc1Record decode_fmrc1(const std::string& bytes);

void write_trajectory(const std::filesystem::path& path, const Trajectory& traj);
Trajectory read_trajectory(const std::filesystem::path& path);

void write_pairs(const std::filesystem::path& path, const TransitionPairSet& pairs, nlohmann::json extra = {});
TransitionPairSet read_pairs(const std::filesystem::path& path);

// Same columns as the binary rows, with a header row.
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj);
void write_pairs_csv(const std::filesystem::path& path, const TransitionPairSet& pairs);

void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m,
                      const std::vector<std::string>& header);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

// Shortest round-trip decimal representation.
std::string format_double(double v);

}  // namespace fmrc::io
