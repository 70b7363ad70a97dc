#include "cortex/dataset_io.hpp"

#include <array>
#include <fstream>
#include <sstream>

namespace cortex {

using nlohmann::json;

namespace {
const std::array<std::string, 3> kSplitNames = {"train", "val", "test"};
}

const std::string& to_string(Split s) { return kSplitNames[static_cast<int>(s)]; }

Split split_from_string(const std::string& s) {
    for (std::size_t i = 0; i < kSplitNames.size(); ++i)
        if (kSplitNames[i] == s) return static_cast<Split>(i);
    throw InputError("unknown split '" + s + "'");
}

Split split_of(const std::string& pair_id) {
    switch (fnv1a64(pair_id) % 10) {
        case 8:
            return Split::val;
        case 9:
            return Split::test;
        default:
            return Split::train;
    }
}

std::vector<ScenePair> filter_split(const std::vector<ScenePair>& pairs, Split s) {
    std::vector<ScenePair> out;
    for (const ScenePair& p : pairs)
        if (split_of(p.pair_id) == s) out.push_back(p);
    return out;
}

void to_json(json& j, const ObjectSpec& o) {
    j = json{{"color", to_string(o.color)},
             {"shape", to_string(o.shape)},
             {"size", to_string(o.size)},
             {"row", o.cell.row},
             {"col", o.cell.col}};
}

void from_json(const json& j, ObjectSpec& o) {
    o.color = color_from_string(j.at("color").get<std::string>());
    o.shape = shape_from_string(j.at("shape").get<std::string>());
    o.size = obj_size_from_string(j.at("size").get<std::string>());
    o.cell.row = j.at("row").get<int>();
    o.cell.col = j.at("col").get<int>();
}

void to_json(json& j, const SceneSpec& s) {
    j = json{{"grid_size", s.grid_size},
             {"objects", s.objects},
             {"seed", s.seed}};
}

void from_json(const json& j, SceneSpec& s) {
    s.grid_size = j.at("grid_size").get<int>();
    s.objects = j.at("objects").get<std::vector<ObjectSpec>>();
    s.seed = j.value("seed", std::uint64_t{0});
}

void to_json(json& j, const ChangeOp& op) {
    j = json{{"kind", to_string(op.kind)}};
    if (op.target_index >= 0) j["target_index"] = op.target_index;
    if (op.new_color) j["new_color"] = to_string(*op.new_color);
    if (op.new_cell) j["new_cell"] = json{{"row", op.new_cell->row}, {"col", op.new_cell->col}};
    if (op.new_object) j["new_object"] = *op.new_object;
}

void from_json(const json& j, ChangeOp& op) {
    op = ChangeOp{};
    op.kind = change_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("target_index")) op.target_index = j.at("target_index").get<int>();
    if (j.contains("new_color"))
        op.new_color = color_from_string(j.at("new_color").get<std::string>());
    if (j.contains("new_cell"))
        op.new_cell = Cell{j.at("new_cell").at("row").get<int>(),
                           j.at("new_cell").at("col").get<int>()};
    if (j.contains("new_object")) op.new_object = j.at("new_object").get<ObjectSpec>();
}

void to_json(json& j, const ScenePair& p) {
    j = json{{"pair_id", p.pair_id},
             {"before", p.before},
             {"after", p.after},
             {"change", p.change},
             {"gt_captions", p.gt_captions}};
}

void from_json(const json& j, ScenePair& p) {
    p.pair_id = j.at("pair_id").get<std::string>();
    p.before = j.at("before").get<SceneSpec>();
    p.after = j.at("after").get<SceneSpec>();
    p.change = j.at("change").get<ChangeOp>();
    p.gt_captions = j.at("gt_captions").get<std::vector<std::string>>();
    if (p.pair_id.empty()) throw InputError("scene pair: empty pair_id");
    if (p.gt_captions.empty()) throw InputError("scene pair: no gt_captions");
    if (p.before.objects.empty() || p.after.objects.empty())
        throw InputError("scene pair: scenes must contain at least one object");
    validate_scene(p.before);
    validate_scene(p.after);
}

void write_pairs_jsonl(const std::string& path, const std::vector<ScenePair>& pairs) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_pairs_jsonl: cannot open " + path);
    for (const ScenePair& p : pairs) f << json(p).dump() << '\n';
    if (!f) throw IoError("write_pairs_jsonl: short write to " + path);
}

std::vector<ScenePair> read_pairs_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_pairs_jsonl: cannot open " + path);
    std::vector<ScenePair> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line).get<ScenePair>());
        } catch (const json::exception& e) {
            throw InputError("read_pairs_jsonl: " + path + ":" +
                             std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_text_file: cannot open " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_text_file: cannot open " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("write_text_file: short write to " + path);
}

}  // namespace cortex
