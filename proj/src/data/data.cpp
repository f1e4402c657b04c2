// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "ipn/errors.hpp"
#include "ipn/rng.hpp"
#include "json.hpp"

namespace ipn {

namespace {

using ordered_json = nlohmann::ordered_json;

// Object-count weights for 1..4 objects. See README ("Toy world").
constexpr std::array<double, kMaxObjects> kCountWeights = {0.01, 0.19, 0.50, 0.30};

std::string object_phrase(const SceneObject& o) {
  std::string out = "a ";
  out += kColorNames[o.color];
  out += ' ';
  out += kShapeNames[o.shape];
  return out;
}

std::string plural(int shape) { return std::string(kShapeNames[shape]) + "s"; }

std::size_t count_tokens(const std::string& text) {
  std::istringstream in(text);
  std::size_t n = 0;
  std::string w;
  while (in >> w) ++n;
  return n;
}

int count_shape(const Scene& s, int shape) {
  return static_cast<int>(
      std::count_if(s.objects.begin(), s.objects.end(), [&](const auto& o) { return o.shape == shape; }));
}

int count_pair(const Scene& s, int shape, int color) {
  return static_cast<int>(std::count_if(s.objects.begin(), s.objects.end(), [&](const auto& o) {
    return o.shape == shape && o.color == color;
  }));
}

std::string color_question(int shape) {
  return "what color is the " + std::string(kShapeNames[shape]) + " ?";
}
std::string count_question(int shape) { return "how many " + plural(shape) + " are there ?"; }
std::string exist_question(int shape) {
  return "is there a " + std::string(kShapeNames[shape]) + " ?";
}
std::string location_question(int shape, int color) {
  return "where is the " + std::string(kColorNames[color]) + " " + std::string(kShapeNames[shape]) +
         " ?";
}

std::string color_answer(int shape, int color) {
  return "the " + std::string(kShapeNames[shape]) + " is " + std::string(kColorNames[color]);
}
std::string count_answer(int shape, int n) {
  if (n == 1) return "there is one " + std::string(kShapeNames[shape]);
  return "there are " + std::string(kCountWords[n]) + " " + plural(shape);
}
std::string exist_answer(int shape, bool present) {
  const std::string name(kShapeNames[shape]);
  return present ? "yes there is a " + name : "no there is no " + name;
}
std::string location_answer(const SceneObject& o) {
  return "the " + std::string(kColorNames[o.color]) + " " + std::string(kShapeNames[o.shape]) +
         " is at row " + std::string(kCountWords[o.row + 1]) + " column " +
         std::string(kCountWords[o.col + 1]);
}

ordered_json sample_to_json(const InstructionSample& s) {
  ordered_json j;
  j["kind"] = kind_name(s.kind);
  j["scene_id"] = s.scene_id;
  j["prompt"] = s.prompt;
  j["target"] = s.target;
  if (s.choices) j["choices"] = *s.choices;
  return j;
}

InstructionSample sample_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractError("record is not a JSON object");
  static const std::set<std::string> kAllowed = {"kind", "scene_id", "prompt", "target", "choices"};
  for (const auto& [key, value] : j.items()) {
    if (!kAllowed.count(key)) throw ContractError("unknown field '" + key + "'");
  }
  for (const char* key : {"kind", "scene_id", "prompt", "target"}) {
    if (!j.contains(key)) throw ContractError(std::string("missing field '") + key + "'");
  }
  InstructionSample s;
  s.kind = parse_kind(j.at("kind").get<std::string>());
  if (!j.at("scene_id").is_number_unsigned()) throw ContractError("scene_id must be unsigned");
  s.scene_id = j.at("scene_id").get<std::uint64_t>();
  s.prompt = j.at("prompt").get<std::string>();
  s.target = j.at("target").get<std::string>();
  if (j.contains("choices")) {
    const auto& c = j.at("choices");
    if (!c.is_array() || c.size() != 4) throw ContractError("choices must hold 4 texts");
    std::array<std::string, 4> arr;
    for (std::size_t i = 0; i < 4; ++i) arr[i] = c.at(i).get<std::string>();
    s.choices = arr;
  }
  if ((s.kind == SampleKind::kFourChoice) != s.choices.has_value()) {
    throw ContractError("choices present iff kind is four_choice");
  }
  if (s.kind == SampleKind::kTrueFalse && s.target != "true" && s.target != "false") {
    throw ContractError("true_false target must be true or false");
  }
  if (s.kind == SampleKind::kFourChoice &&
      std::find(kChoiceLetters.begin(), kChoiceLetters.end(), s.target) == kChoiceLetters.end()) {
    throw ContractError("four_choice target must be one of (a)..(d)");
  }
  return s;
}

template <typename T, typename Parse>
std::vector<T> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    try {
      out.push_back(parse(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), lineno);
    } catch (const ContractError& e) {
      throw ParseError(path.string() + ": " + e.what(), lineno);
    }
  }
  return out;
}

template <typename T, typename ToJson>
void write_jsonl(const std::filesystem::path& path, const std::vector<T>& items, ToJson to_json) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  for (const auto& item : items) out << to_json(item).dump() << '\n';
  if (!out) throw ContractError("write failed for " + path.string());
}

ordered_json scene_to_json(const Scene& s) {
  ordered_json j;
  j["id"] = s.id;
  j["objects"] = ordered_json::array();
  for (const auto& o : s.objects) {
    ordered_json jo;
    jo["shape"] = kShapeNames[o.shape];
    jo["color"] = kColorNames[o.color];
    jo["row"] = o.row;
    jo["col"] = o.col;
    j["objects"].push_back(jo);
  }
  return j;
}

template <std::size_t N>
int index_of(const std::array<std::string_view, N>& names, const std::string& value,
             const char* what) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == value) return static_cast<int>(i);
  }
  throw ContractError(std::string("unknown ") + what + " '" + value + "'");
}

Scene scene_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractError("record is not a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "id" && key != "objects") throw ContractError("unknown field '" + key + "'");
  }
  Scene s;
  s.id = j.at("id").get<std::uint64_t>();
  for (const auto& jo : j.at("objects")) {
    for (const auto& [key, value] : jo.items()) {
      if (key != "shape" && key != "color" && key != "row" && key != "col") {
        throw ContractError("unknown object field '" + key + "'");
      }
    }
    SceneObject o;
    o.shape = index_of(kShapeNames, jo.at("shape").get<std::string>(), "shape");
    o.color = index_of(kColorNames, jo.at("color").get<std::string>(), "color");
    o.row = jo.at("row").get<int>();
    o.col = jo.at("col").get<int>();
    s.objects.push_back(o);
  }
  validate_scene(s);
  return s;
}

}  // namespace

std::string_view kind_name(SampleKind kind) {
  switch (kind) {
    case SampleKind::kCaption: return "caption";
    case SampleKind::kTrueFalse: return "true_false";
    case SampleKind::kFourChoice: return "four_choice";
    case SampleKind::kVqa: return "vqa";
    case SampleKind::kDetail: return "detail";
  }
  throw ContractError("kind_name: bad kind");
}

SampleKind parse_kind(std::string_view name) {
  for (auto k : {SampleKind::kCaption, SampleKind::kTrueFalse, SampleKind::kFourChoice,
                 SampleKind::kVqa, SampleKind::kDetail}) {
    if (kind_name(k) == name) return k;
  }
  throw ContractError("unknown sample kind '" + std::string(name) + "'");
}

std::optional<VqaType> vqa_type(const std::string& prompt) {
  if (prompt.starts_with("what color is the ")) return VqaType::kColor;
  if (prompt.starts_with("how many ")) return VqaType::kCount;
  if (prompt.starts_with("is there a ")) return VqaType::kExist;
  if (prompt.starts_with("where is the ")) return VqaType::kLocation;
  return std::nullopt;
}

std::string_view vqa_type_name(VqaType type) {
  switch (type) {
    case VqaType::kColor: return "color";
    case VqaType::kCount: return "count";
    case VqaType::kExist: return "exist";
    case VqaType::kLocation: return "location";
  }
  return "?";
}

std::uint64_t scene_id(std::uint64_t seed, std::uint64_t index) {
  return mix64(mix64(seed) + index);
}

Scene gen_scene(std::uint64_t seed, std::uint64_t index) {
  Scene s;
  s.id = scene_id(seed, index);
  std::mt19937_64 rng(mix64(s.id));
  const double u = uniform_unit(rng);
  int n = kMaxObjects;
  double acc = 0.0;
  for (int i = 0; i < kMaxObjects; ++i) {
    acc += kCountWeights[i];
    if (u < acc) {
      n = i + 1;
      break;
    }
  }
  std::array<int, kGridSize * kGridSize> cells{};
  for (int i = 0; i < kGridSize * kGridSize; ++i) cells[i] = i;
  for (int i = 0; i < n; ++i) {
    const auto j = i + static_cast<int>(uniform_index(rng, cells.size() - i));
    std::swap(cells[i], cells[j]);
  }
  for (int i = 0; i < n; ++i) {
    SceneObject o;
    o.row = cells[i] / kGridSize;
    o.col = cells[i] % kGridSize;
    o.shape = static_cast<int>(uniform_index(rng, kShapeNames.size()));
    o.color = static_cast<int>(uniform_index(rng, kColorNames.size()));
    s.objects.push_back(o);
  }
  std::sort(s.objects.begin(), s.objects.end(), [](const auto& a, const auto& b) {
    return a.row * kGridSize + a.col < b.row * kGridSize + b.col;
  });
  return s;
}

std::vector<Scene> gen_scenes(std::uint64_t seed, std::size_t n) {
  if (n == 0) throw ContractError("gen_scenes: n must be at least 1");
  std::vector<Scene> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_scene(seed, i));
  return out;
}

bool is_held_out(std::uint64_t id) { return (id & 7U) >= 6U; }

void validate_scene(const Scene& scene) {
  const auto n = scene.objects.size();
  if (n < 1 || n > static_cast<std::size_t>(kMaxObjects)) {
    throw ContractError("scene " + std::to_string(scene.id) + " has " + std::to_string(n) +
                        " objects");
  }
  int prev_cell = -1;
  for (const auto& o : scene.objects) {
    if (o.shape < 0 || o.shape >= static_cast<int>(kShapeNames.size()) || o.color < 0 ||
        o.color >= static_cast<int>(kColorNames.size()) || o.row < 0 || o.row >= kGridSize ||
        o.col < 0 || o.col >= kGridSize) {
      throw ContractError("scene " + std::to_string(scene.id) + " has an out-of-range object");
    }
    const int cell = o.row * kGridSize + o.col;
    if (cell <= prev_cell) {
      throw ContractError("scene " + std::to_string(scene.id) +
                          " cells must be distinct and row-major ordered");
    }
    prev_cell = cell;
  }
}

std::string render_caption(const Scene& scene) {
  std::string out;
  for (const auto& o : scene.objects) {
    if (!out.empty()) out += " and ";
    out += object_phrase(o);
  }
  return out;
}

std::string render_detail(const Scene& scene) {
  std::string out;
  for (const auto& o : scene.objects) {
    if (!out.empty()) out += " and ";
    out += object_phrase(o) + " at row " + std::string(kCountWords[o.row + 1]) + " column " +
           std::string(kCountWords[o.col + 1]);
  }
  return out;
}

InstructionSample make_caption_sample(const Scene& scene) {
  return {SampleKind::kCaption, scene.id, "", render_caption(scene), std::nullopt};
}

InstructionSample make_detail_sample(const Scene& scene) {
  return {SampleKind::kDetail, scene.id, std::string(kDetailPrompt), render_detail(scene),
          std::nullopt};
}

std::vector<InstructionSample> make_vqa_samples(const Scene& scene) {
  std::vector<InstructionSample> out;
  auto add = [&](std::string q, std::string a) {
    out.push_back({SampleKind::kVqa, scene.id, std::move(q), std::move(a), std::nullopt});
  };
  for (int shape = 0; shape < static_cast<int>(kShapeNames.size()); ++shape) {
    const int n = count_shape(scene, shape);
    if (n == 1) {
      const auto it = std::find_if(scene.objects.begin(), scene.objects.end(),
                                   [&](const auto& o) { return o.shape == shape; });
      add(color_question(shape), color_answer(shape, it->color));
    }
    add(count_question(shape), count_answer(shape, n));
    add(exist_question(shape), exist_answer(shape, n > 0));
  }
  for (const auto& o : scene.objects) {
    if (count_pair(scene, o.shape, o.color) == 1) {
      add(location_question(o.shape, o.color), location_answer(o));
    }
  }
  return out;
}

std::string true_false_prompt(const std::string& caption) { return "true or false : " + caption; }

std::string four_choice_prompt(const std::array<std::string, 4>& choices) {
  std::string out = "which caption matches ?";
  for (std::size_t i = 0; i < 4; ++i) {
    out += ' ';
    out += kChoiceLetters[i];
    out += ' ';
    out += choices[i];
  }
  return out;
}

std::vector<InstructionSample> make_matching_samples(const std::vector<Scene>& scenes,
                                                     std::uint64_t seed) {
  if (scenes.size() < 5) throw ContractError("make_matching_samples: need at least 5 scenes");
  std::vector<std::string> captions;
  captions.reserve(scenes.size());
  for (const auto& s : scenes) captions.push_back(render_caption(s));
  std::mt19937_64 rng(seed);
  std::vector<InstructionSample> out;
  constexpr int kTries = 100;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string& own = captions[i];
    out.push_back({SampleKind::kTrueFalse, scenes[i].id, true_false_prompt(own), "true",
                   std::nullopt});
    for (int t = 0; t < kTries; ++t) {
      const auto j = uniform_index(rng, scenes.size());
      if (j == i || captions[j] == own) continue;
      out.push_back({SampleKind::kTrueFalse, scenes[i].id, true_false_prompt(captions[j]), "false",
                     std::nullopt});
      break;
    }
    for (int t = 0; t < kTries; ++t) {
      std::array<std::string, 4> choices;
      const auto answer = uniform_index(rng, 4);
      choices[answer] = own;
      bool ok = true;
      for (std::size_t slot = 0; slot < 4 && ok; ++slot) {
        if (slot == answer) continue;
        ok = false;
        for (int d = 0; d < kTries; ++d) {
          const auto j = uniform_index(rng, scenes.size());
          if (j == i || std::find(choices.begin(), choices.end(), captions[j]) != choices.end()) {
            continue;
          }
          choices[slot] = captions[j];
          ok = true;
          break;
        }
      }
      if (!ok) continue;
      std::string prompt = four_choice_prompt(choices);
      if (count_tokens(prompt) > kMaxChoicePromptTokens) continue;
      out.push_back({SampleKind::kFourChoice, scenes[i].id, std::move(prompt),
                     std::string(kChoiceLetters[answer]), choices});
      break;
    }
  }
  return out;
}

std::optional<std::string> vqa_oracle(const Scene& scene, const std::string& prompt) {
  for (int shape = 0; shape < static_cast<int>(kShapeNames.size()); ++shape) {
    const int n = count_shape(scene, shape);
    if (prompt == color_question(shape)) {
      if (n != 1) return std::nullopt;
      for (const auto& o : scene.objects) {
        if (o.shape == shape) return color_answer(shape, o.color);
      }
    }
    if (prompt == count_question(shape)) return count_answer(shape, n);
    if (prompt == exist_question(shape)) return exist_answer(shape, n > 0);
    for (int color = 0; color < static_cast<int>(kColorNames.size()); ++color) {
      if (prompt != location_question(shape, color)) continue;
      if (count_pair(scene, shape, color) != 1) return std::nullopt;
      for (const auto& o : scene.objects) {
        if (o.shape == shape && o.color == color) return location_answer(o);
      }
    }
  }
  return std::nullopt;
}

void write_samples_jsonl(const std::filesystem::path& path,
                         const std::vector<InstructionSample>& samples) {
  write_jsonl(path, samples, sample_to_json);
}

std::vector<InstructionSample> read_samples_jsonl(const std::filesystem::path& path) {
  return read_jsonl<InstructionSample>(path, sample_from_json);
}

void write_scenes_jsonl(const std::filesystem::path& path, const std::vector<Scene>& scenes) {
  write_jsonl(path, scenes, scene_to_json);
}

std::vector<Scene> read_scenes_jsonl(const std::filesystem::path& path) {
  return read_jsonl<Scene>(path, scene_from_json);
}

}  // namespace ipn
