#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cortex/common.hpp"
#include "cortex/image.hpp"

namespace cortex {

enum class Color { red, blue, green, yellow, gray, brown };
enum class Shape { cube, sphere, cylinder };
enum class ObjSize { small, large };
enum class ChangeKind { add, remove, move, recolor, no_change };

inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumSizes = 2;
inline constexpr int kNumChangeKinds = 5;

const std::string& to_string(Color c);
const std::string& to_string(Shape s);
const std::string& to_string(ObjSize s);
const std::string& to_string(ChangeKind k);
Color color_from_string(const std::string& s);
Shape shape_from_string(const std::string& s);
ObjSize obj_size_from_string(const std::string& s);
ChangeKind change_kind_from_string(const std::string& s);

struct Cell {
    int row = 0;
    int col = 0;
    bool operator==(const Cell&) const = default;
    auto operator<=>(const Cell&) const = default;
};

struct ObjectSpec {
    Color color = Color::red;
    Shape shape = Shape::cube;
    ObjSize size = ObjSize::small;
    Cell cell;
    bool operator==(const ObjectSpec&) const = default;
    std::string phrase() const;  // "small red cube"
};

struct SceneSpec {
    int grid_size = 5;
    std::vector<ObjectSpec> objects;  // kept sorted by (row, col)
    std::uint64_t seed = 0;           // stream that produced the scene
    bool operator==(const SceneSpec&) const = default;
};

struct ChangeOp {
    ChangeKind kind = ChangeKind::no_change;
    int target_index = -1;                  // remove / move / recolor
    std::optional<Color> new_color;         // recolor
    std::optional<Cell> new_cell;           // move
    std::optional<ObjectSpec> new_object;   // add
    bool operator==(const ChangeOp&) const = default;
};

struct ScenePair {
    std::string pair_id;
    SceneSpec before;
    SceneSpec after;
    ChangeOp change;
    std::vector<std::string> gt_captions;
};

struct KindMix {
    // Probabilities in enum order; must sum to 1.
    std::array<double, kNumChangeKinds> p{0.225, 0.225, 0.225, 0.225, 0.1};
    double prob(ChangeKind k) const { return p[static_cast<int>(k)]; }
};

struct GenConfig {
    int n_pairs = 0;
    std::uint64_t seed = 0;
    int grid_size = 5;
    int min_objects = 2;
    int max_objects = 6;  // clamped to grid_size^2 - 1
    KindMix mix;
};

// Throws ContractError on out-of-bounds cells, duplicate occupancy, or
// unsorted object order.
void validate_scene(const SceneSpec& scene);
void sort_canonical(SceneSpec& scene);

SceneSpec apply_change(const SceneSpec& before, const ChangeOp& op);
// The op that maps `after` back onto `before`; apply_change(after, inverse)
// reproduces `before` exactly.
ChangeOp inverse_change(const SceneSpec& before, const ChangeOp& op);

std::string region_phrase(Cell cell, int grid_size);  // "the top left" etc.
std::string render_gt_caption(const ScenePair& pair);

std::vector<ScenePair> generate_dataset(const GenConfig& cfg);

// One sentence per object describing it relative to its nearest neighbor
// (Manhattan distance, ties to the lowest index).
std::vector<std::string> render_pseudo_rte(const SceneSpec& scene);

Image rasterize(const SceneSpec& scene, int resolution);

}  // namespace cortex
