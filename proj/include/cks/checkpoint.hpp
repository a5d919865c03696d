#pragma once

// Checkpoint container (libtorch archive). Keys:
//   schema_version           int
//   principal/config         JSON text, principal/config_hash  FNV-1a of it
//   principal/params         module archive
//   collaborator/...         same layout, optional (dropped for deployment)
//   optim/principal, optim/collaborator, step, run_config    training state
// Writes go to "<path>.tmp" and are renamed into place.

#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "cks/principal.hpp"

namespace cks::checkpoint {

inline constexpr std::int64_t kSchemaVersion = 1;

void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value);
std::string read_string(torch::serialize::InputArchive& archive, const std::string& key);
bool try_read_string(torch::serialize::InputArchive& archive, const std::string& key, std::string& value);
void write_int(torch::serialize::OutputArchive& archive, const std::string& key, std::int64_t value);
std::int64_t read_int(torch::serialize::InputArchive& archive, const std::string& key);

void write_principal(torch::serialize::OutputArchive& archive, PrincipalModel& model);
PrincipalModel read_principal(torch::serialize::InputArchive& archive);

/// Loads an archive, translating libtorch errors into LoadError.
void load_archive(torch::serialize::InputArchive& archive, const std::filesystem::path& path);
/// Saves atomically (temp file + rename).
void save_archive(torch::serialize::OutputArchive& archive, const std::filesystem::path& path);

/// Checks the schema version; throws ConfigError on mismatch.
void check_schema(torch::serialize::InputArchive& archive, const std::filesystem::path& path);

}  // namespace cks::checkpoint
