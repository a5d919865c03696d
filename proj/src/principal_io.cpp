#include "cks/checkpoint.hpp"
#include "cks/error.hpp"
#include "cks/inference.hpp"
#include "cks/json_util.hpp"

namespace fs = std::filesystem;

namespace cks::checkpoint {

void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value) {
  archive.write(key, c10::IValue(value));
}

bool try_read_string(torch::serialize::InputArchive& archive, const std::string& key, std::string& value) {
  c10::IValue v;
  if (!archive.try_read(key, v) || !v.isString()) return false;
  value = v.toStringRef();
  return true;
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
  std::string value;
  if (!try_read_string(archive, key, value)) throw LoadError("checkpoint is missing '" + key + "'");
  return value;
}

void write_int(torch::serialize::OutputArchive& archive, const std::string& key, std::int64_t value) {
  archive.write(key, c10::IValue(value));
}

std::int64_t read_int(torch::serialize::InputArchive& archive, const std::string& key) {
  c10::IValue v;
  if (!archive.try_read(key, v) || !v.isInt()) throw LoadError("checkpoint is missing '" + key + "'");
  return v.toInt();
}

void write_principal(torch::serialize::OutputArchive& archive, PrincipalModel& model) {
  const std::string config = to_json(model->config()).dump();
  write_string(archive, "principal/config", config);
  write_string(archive, "principal/config_hash", json_util::fnv1a_hex(config));
  torch::serialize::OutputArchive params;
  model->save(params);
  archive.write("principal/params", params);
}

PrincipalModel read_principal(torch::serialize::InputArchive& archive) {
  const std::string text = read_string(archive, "principal/config");
  const std::string hash = read_string(archive, "principal/config_hash");
  if (json_util::fnv1a_hex(text) != hash) {
    throw ConfigError("checkpoint principal config does not match its recorded hash");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("checkpoint principal config: ") + e.what());
  }
  PrincipalModel model(principal_config_from_json(j));
  torch::serialize::InputArchive params;
  if (!archive.try_read("principal/params", params)) throw LoadError("checkpoint is missing 'principal/params'");
  try {
    model->load(params);
  } catch (const c10::Error& e) {
    throw ConfigError(std::string("checkpoint parameters do not fit the recorded config: ") + e.what_without_backtrace());
  }
  return model;
}

void load_archive(torch::serialize::InputArchive& archive, const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
}

void save_archive(torch::serialize::OutputArchive& archive, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  archive.save_to(tmp.string());
  fs::rename(tmp, path);
}

void check_schema(torch::serialize::InputArchive& archive, const fs::path& path) {
  const auto version = read_int(archive, "schema_version");
  if (version != kSchemaVersion) {
    throw ConfigError("checkpoint " + path.string() + " has schema version " + std::to_string(version) +
                      ", expected " + std::to_string(kSchemaVersion));
  }
}

}  // namespace cks::checkpoint

namespace cks {

PrincipalModel load_principal(const fs::path& path) {
  torch::serialize::InputArchive archive;
  checkpoint::load_archive(archive, path);
  checkpoint::check_schema(archive, path);
  return checkpoint::read_principal(archive);
}

}  // namespace cks
