#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cortex/toy_scene.hpp"

namespace cortex {

enum class Split { train, val, test };

const std::string& to_string(Split s);
Split split_from_string(const std::string& s);

// Stable 80/10/10 assignment from the pair id alone, so regenerating or
// merging datasets never reshuffles membership.
Split split_of(const std::string& pair_id);

std::vector<ScenePair> filter_split(const std::vector<ScenePair>& pairs, Split s);

void to_json(nlohmann::json& j, const ObjectSpec& o);
void from_json(const nlohmann::json& j, ObjectSpec& o);
void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);
void to_json(nlohmann::json& j, const ChangeOp& op);
void from_json(const nlohmann::json& j, ChangeOp& op);
void to_json(nlohmann::json& j, const ScenePair& p);
void from_json(const nlohmann::json& j, ScenePair& p);

void write_pairs_jsonl(const std::string& path, const std::vector<ScenePair>& pairs);
std::vector<ScenePair> read_pairs_jsonl(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace cortex
