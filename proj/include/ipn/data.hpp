// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy multimodal world: symbolic scenes on a 4x4 grid and the instruction
// corpora built from them.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace ipn {

inline constexpr int kGridSize = 4;
inline constexpr int kMaxObjects = 4;
inline constexpr std::array<std::string_view, 3> kShapeNames = {"circle", "square", "triangle"};
inline constexpr std::array<std::string_view, 4> kColorNames = {"red", "green", "blue", "yellow"};
inline constexpr std::array<std::string_view, 5> kCountWords = {"no", "one", "two", "three",
                                                                 "four"};
inline constexpr std::array<std::string_view, 4> kChoiceLetters = {"(a)", "(b)", "(c)", "(d)"};
/// Longest four_choice prompt (in tokens) the generator emits.
inline constexpr std::size_t kMaxChoicePromptTokens = 56;

struct SceneObject {
  int shape = 0;
  int color = 0;
  int row = 0;
  int col = 0;
  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  std::uint64_t id = 0;
  /// Sorted row-major by cell.
  std::vector<SceneObject> objects;
  bool operator==(const Scene&) const = default;
};

enum class SampleKind { kCaption, kTrueFalse, kFourChoice, kVqa, kDetail };

std::string_view kind_name(SampleKind kind);
/// Inverse of kind_name; throws ContractError on unknown names.
SampleKind parse_kind(std::string_view name);

struct InstructionSample {
  SampleKind kind = SampleKind::kCaption;
  std::uint64_t scene_id = 0;
  std::string prompt;
  std::string target;
  std::optional<std::array<std::string, 4>> choices;
  bool operator==(const InstructionSample&) const = default;
};

/// Question families of the vqa kind, recovered from the prompt template.
enum class VqaType { kColor, kCount, kExist, kLocation };
std::optional<VqaType> vqa_type(const std::string& prompt);
std::string_view vqa_type_name(VqaType type);

/// Stable scene id for (seed, index). Distinct indices give distinct ids.
std::uint64_t scene_id(std::uint64_t seed, std::uint64_t index);
Scene gen_scene(std::uint64_t seed, std::uint64_t index);
std::vector<Scene> gen_scenes(std::uint64_t seed, std::size_t n);
/// Scenes whose id has low three bits >= 6 belong to the held-out split.
bool is_held_out(std::uint64_t id);
/// Checks the Scene invariants; throws ContractError describing the first violation.
void validate_scene(const Scene& scene);

std::string render_caption(const Scene& scene);
std::string render_detail(const Scene& scene);

inline constexpr std::string_view kDetailPrompt = "describe the image in detail .";

InstructionSample make_caption_sample(const Scene& scene);
InstructionSample make_detail_sample(const Scene& scene);
std::vector<InstructionSample> make_vqa_samples(const Scene& scene);
/// One positive and one negative true_false item plus one four_choice item
/// per scene. Negatives come from other scenes of the same list.
std::vector<InstructionSample> make_matching_samples(const std::vector<Scene>& scenes,
                                                     std::uint64_t seed);
std::string true_false_prompt(const std::string& caption);
std::string four_choice_prompt(const std::array<std::string, 4>& choices);

/// Re-derives the answer to a vqa prompt from the scene record alone.
/// Returns nullopt if the question is not applicable to the scene.
std::optional<std::string> vqa_oracle(const Scene& scene, const std::string& prompt);

// JSONL persistence. Readers reject unknown fields and report the failing
// line; nothing is returned on failure.
void write_samples_jsonl(const std::filesystem::path& path,
                         const std::vector<InstructionSample>& samples);
std::vector<InstructionSample> read_samples_jsonl(const std::filesystem::path& path);
void write_scenes_jsonl(const std::filesystem::path& path, const std::vector<Scene>& scenes);
std::vector<Scene> read_scenes_jsonl(const std::filesystem::path& path);

}  // namespace ipn
