#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "prompt_evolve/param_space.hpp"

namespace prompt_evolve {

enum class Stage { Init, Trained, Fused };

std::string_view stage_name(Stage stage);
Stage parse_stage(std::string_view name);

// JSON document:
//   {"format_version":1, "task_id":int, "stage":"init"|"trained"|"fused",
//    "entries":[{"name":str, "shape":[int], "values":[float]}]}
// Values round-trip exactly; entry order defines alignment.
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  int task_id = 0;
  Stage stage = Stage::Init;
  ParameterVector params;
};

std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(std::string_view text);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Whole-file helpers. Writes go to a sibling temp file and are renamed into place.
std::string read_text_file(const std::filesystem::path& path);
void write_text_file_atomic(const std::filesystem::path& path, std::string_view content);

// 64-bit FNV-1a, stable across platforms; used to fingerprint frozen weights.
uint64_t fnv1a64(std::string_view bytes);

}  // namespace prompt_evolve
