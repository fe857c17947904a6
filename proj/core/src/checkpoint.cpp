#include "prompt_evolve/checkpoint.hpp"

#include <atomic>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "prompt_evolve/errors.hpp"

namespace prompt_evolve {

using nlohmann::json;

std::string_view stage_name(Stage stage) {
  switch (stage) {
    case Stage::Init:
      return "init";
    case Stage::Trained:
      return "trained";
    case Stage::Fused:
      return "fused";
  }
  return "init";
}

Stage parse_stage(std::string_view name) {
  if (name == "init") return Stage::Init;
  if (name == "trained") return Stage::Trained;
  if (name == "fused") return Stage::Fused;
  throw ConfigError("unknown checkpoint stage '" + std::string(name) + "'");
}

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  json doc;
  doc["format_version"] = Checkpoint::kFormatVersion;
  doc["task_id"] = ckpt.task_id;
  doc["stage"] = std::string(stage_name(ckpt.stage));
  json entries = json::array();
  for (const auto& e : ckpt.params.entries()) {
    entries.push_back({{"name", e.name}, {"shape", e.shape}, {"values", e.values}});
  }
  doc["entries"] = std::move(entries);
  return doc.dump() + "\n";
}

Checkpoint checkpoint_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("checkpoint parse error: ") + e.what());
  }
  try {
    if (doc.at("format_version").get<int>() != Checkpoint::kFormatVersion) {
      throw ConfigError("unsupported checkpoint format_version " + doc.at("format_version").dump());
    }
    Checkpoint ckpt;
    ckpt.task_id = doc.at("task_id").get<int>();
    ckpt.stage = parse_stage(doc.at("stage").get<std::string>());
    std::vector<ParameterEntry> entries;
    for (const auto& e : doc.at("entries")) {
      entries.push_back(ParameterEntry{e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
                                       e.at("values").get<std::vector<double>>()});
    }
    ckpt.params = ParameterVector(std::move(entries));
    return ckpt;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint field error: ") + e.what());
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("checkpoint entry error: ") + e.what());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_text_file_atomic(path, checkpoint_to_json(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(read_text_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text_file_atomic(const std::filesystem::path& path, std::string_view content) {
  static std::atomic<unsigned> counter{0};
  auto tmp = path;
  tmp += ".tmp" + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace prompt_evolve
