#include "cortex/toy_scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace cortex {

namespace {

const std::array<std::string, kNumColors> kColorNames = {
    "red", "blue", "green", "yellow", "gray", "brown"};
const std::array<std::string, kNumShapes> kShapeNames = {"cube", "sphere",
                                                         "cylinder"};
const std::array<std::string, kNumSizes> kSizeNames = {"small", "large"};
const std::array<std::string, kNumChangeKinds> kKindNames = {
    "add", "remove", "move", "recolor", "no_change"};

template <typename E, std::size_t N>
E enum_from_string(const std::array<std::string, N>& names,
                   const std::string& s, const char* what) {
    for (std::size_t i = 0; i < N; ++i)
        if (names[i] == s) return static_cast<E>(i);
    throw InputError(std::string("unknown ") + what + " '" + s + "'");
}

const std::array<std::array<std::uint8_t, 3>, kNumColors> kPalette = {{
    {200, 40, 40},     // red
    {40, 70, 200},     // blue
    {40, 170, 60},     // green
    {230, 220, 50},    // yellow
    {128, 128, 128},   // gray
    {139, 90, 40},     // brown
}};
const std::array<std::uint8_t, 3> kBackground = {235, 235, 235};

int occupant_index(const SceneSpec& scene, Cell cell) {
    for (std::size_t i = 0; i < scene.objects.size(); ++i)
        if (scene.objects[i].cell == cell) return static_cast<int>(i);
    return -1;
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractError(msg);
}

// Deterministic per-pair stream independent of generation order.
std::mt19937_64 pair_rng(std::uint64_t seed, int index) {
    std::uint64_t s = splitmix64(seed ^ (0x9e3779b97f4a7c15ull *
                                         (static_cast<std::uint64_t>(index) + 1)));
    return std::mt19937_64(splitmix64(s));
}

ObjectSpec random_object(std::mt19937_64& rng) {
    ObjectSpec o;
    o.color = static_cast<Color>(uniform_index(rng, kNumColors));
    o.shape = static_cast<Shape>(uniform_index(rng, kNumShapes));
    o.size = static_cast<ObjSize>(uniform_index(rng, kNumSizes));
    return o;
}

Cell random_free_cell(const SceneSpec& scene, std::mt19937_64& rng) {
    std::vector<Cell> free;
    for (int r = 0; r < scene.grid_size; ++r)
        for (int c = 0; c < scene.grid_size; ++c)
            if (occupant_index(scene, {r, c}) < 0) free.push_back({r, c});
    require(!free.empty(), "random_free_cell: scene is full");
    return free[uniform_index(rng, free.size())];
}

// 0 = low third, 1 = middle, 2 = high third of [0, g).
int band(int x, int g) {
    double mid = (g - 1) / 2.0;
    if (x < mid - 0.25) return 0;
    if (x > mid + 0.25) return 2;
    return 1;
}

}  // namespace

const std::string& to_string(Color c) { return kColorNames[static_cast<int>(c)]; }
const std::string& to_string(Shape s) { return kShapeNames[static_cast<int>(s)]; }
const std::string& to_string(ObjSize s) { return kSizeNames[static_cast<int>(s)]; }
const std::string& to_string(ChangeKind k) { return kKindNames[static_cast<int>(k)]; }

Color color_from_string(const std::string& s) {
    return enum_from_string<Color>(kColorNames, s, "color");
}
Shape shape_from_string(const std::string& s) {
    return enum_from_string<Shape>(kShapeNames, s, "shape");
}
ObjSize obj_size_from_string(const std::string& s) {
    return enum_from_string<ObjSize>(kSizeNames, s, "size");
}
ChangeKind change_kind_from_string(const std::string& s) {
    return enum_from_string<ChangeKind>(kKindNames, s, "change kind");
}

std::string ObjectSpec::phrase() const {
    return to_string(size) + " " + to_string(color) + " " + to_string(shape);
}

void validate_scene(const SceneSpec& scene) {
    require(scene.grid_size >= 2, "scene: grid_size must be at least 2");
    for (const ObjectSpec& o : scene.objects)
        require(o.cell.row >= 0 && o.cell.row < scene.grid_size &&
                    o.cell.col >= 0 && o.cell.col < scene.grid_size,
                "scene: object cell out of bounds");
    for (std::size_t i = 1; i < scene.objects.size(); ++i) {
        require(scene.objects[i - 1].cell < scene.objects[i].cell,
                scene.objects[i - 1].cell == scene.objects[i].cell
                    ? "scene: duplicate cell occupancy"
                    : "scene: objects not in canonical (row, col) order");
    }
}

void sort_canonical(SceneSpec& scene) {
    std::sort(scene.objects.begin(), scene.objects.end(),
              [](const ObjectSpec& a, const ObjectSpec& b) { return a.cell < b.cell; });
}

SceneSpec apply_change(const SceneSpec& before, const ChangeOp& op) {
    validate_scene(before);
    SceneSpec after = before;
    auto target_ok = [&] {
        require(op.target_index >= 0 &&
                    op.target_index < static_cast<int>(before.objects.size()),
                "apply_change: target_index out of range");
    };
    switch (op.kind) {
        case ChangeKind::add: {
            require(op.new_object.has_value(), "apply_change: add needs new_object");
            require(occupant_index(before, op.new_object->cell) < 0,
                    "apply_change: add target cell occupied");
            after.objects.push_back(*op.new_object);
            sort_canonical(after);
            break;
        }
        case ChangeKind::remove: {
            target_ok();
            require(before.objects.size() > 1,
                    "apply_change: remove would empty the scene");
            after.objects.erase(after.objects.begin() + op.target_index);
            break;
        }
        case ChangeKind::move: {
            target_ok();
            require(op.new_cell.has_value(), "apply_change: move needs new_cell");
            require(*op.new_cell != before.objects[op.target_index].cell,
                    "apply_change: move to the same cell");
            require(occupant_index(before, *op.new_cell) < 0,
                    "apply_change: move target cell occupied");
            after.objects[op.target_index].cell = *op.new_cell;
            sort_canonical(after);
            break;
        }
        case ChangeKind::recolor: {
            target_ok();
            require(op.new_color.has_value(), "apply_change: recolor needs new_color");
            require(*op.new_color != before.objects[op.target_index].color,
                    "apply_change: recolor to the same color");
            after.objects[op.target_index].color = *op.new_color;
            break;
        }
        case ChangeKind::no_change:
            break;
    }
    validate_scene(after);
    return after;
}

ChangeOp inverse_change(const SceneSpec& before, const ChangeOp& op) {
    SceneSpec after = apply_change(before, op);
    ChangeOp inv;
    switch (op.kind) {
        case ChangeKind::add: {
            inv.kind = ChangeKind::remove;
            inv.target_index = occupant_index(after, op.new_object->cell);
            break;
        }
        case ChangeKind::remove: {
            inv.kind = ChangeKind::add;
            inv.new_object = before.objects[op.target_index];
            break;
        }
        case ChangeKind::move: {
            inv.kind = ChangeKind::move;
            inv.target_index = occupant_index(after, *op.new_cell);
            inv.new_cell = before.objects[op.target_index].cell;
            break;
        }
        case ChangeKind::recolor: {
            inv.kind = ChangeKind::recolor;
            inv.target_index = op.target_index;
            inv.new_color = before.objects[op.target_index].color;
            break;
        }
        case ChangeKind::no_change:
            inv.kind = ChangeKind::no_change;
            break;
    }
    return inv;
}

std::string region_phrase(Cell cell, int grid_size) {
    static const std::array<std::string, 3> kVert = {"top", "middle", "bottom"};
    static const std::array<std::string, 3> kHoriz = {"left", "center", "right"};
    int v = band(cell.row, grid_size);
    int h = band(cell.col, grid_size);
    if (v == 1 && h == 1) return "the center";
    if (v == 1) return "the middle " + kHoriz[h];
    if (h == 1) return "the " + kVert[v] + " center";
    return "the " + kVert[v] + " " + kHoriz[h];
}

std::string render_gt_caption(const ScenePair& pair) {
    const ChangeOp& op = pair.change;
    const SceneSpec& before = pair.before;
    switch (op.kind) {
        case ChangeKind::add:
            return "the " + op.new_object->phrase() + " was added at " +
                   region_phrase(op.new_object->cell, before.grid_size);
        case ChangeKind::remove:
            return "the " + before.objects[op.target_index].phrase() + " is missing";
        case ChangeKind::move: {
            const ObjectSpec& o = before.objects[op.target_index];
            return "the " + o.phrase() + " moved from " +
                   region_phrase(o.cell, before.grid_size) + " to " +
                   region_phrase(*op.new_cell, before.grid_size);
        }
        case ChangeKind::recolor: {
            const ObjectSpec& o = before.objects[op.target_index];
            return "the " + o.phrase() + " changed to " + to_string(*op.new_color);
        }
        case ChangeKind::no_change:
            return "there is no change";
    }
    throw ContractError("render_gt_caption: bad change kind");
}

std::vector<std::string> render_pseudo_rte(const SceneSpec& scene) {
    validate_scene(scene);
    std::vector<std::string> out;
    const auto& objs = scene.objects;
    for (std::size_t i = 0; i < objs.size(); ++i) {
        if (objs.size() == 1) {
            out.push_back("the " + objs[0].phrase() + " is the only object");
            break;
        }
        std::size_t best = i == 0 ? 1 : 0;
        int best_d = 1 << 20;
        for (std::size_t j = 0; j < objs.size(); ++j) {
            if (j == i) continue;
            int d = std::abs(objs[i].cell.row - objs[j].cell.row) +
                    std::abs(objs[i].cell.col - objs[j].cell.col);
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        int dr = objs[i].cell.row - objs[best].cell.row;
        int dc = objs[i].cell.col - objs[best].cell.col;
        std::string rel;
        if (std::abs(dr) > std::abs(dc))
            rel = dr > 0 ? "below" : "above";
        else
            rel = dc > 0 ? "to the right of" : "to the left of";
        out.push_back("the " + objs[i].phrase() + " is " + rel + " the " +
                      objs[best].phrase());
    }
    return out;
}

Image rasterize(const SceneSpec& scene, int resolution) {
    validate_scene(scene);
    if (resolution < 8 * scene.grid_size || resolution % scene.grid_size != 0)
        throw ConfigError("rasterize: resolution must be a multiple of grid_size and at least 8px per cell");
    Image img;
    img.height = img.width = resolution;
    img.rgb.assign(static_cast<std::size_t>(resolution) * resolution * 3, 0);
    for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x)
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = kBackground[ch];

    const int s = resolution / scene.grid_size;
    for (const ObjectSpec& o : scene.objects) {
        const double cy = (o.cell.row + 0.5) * s;
        const double cx = (o.cell.col + 0.5) * s;
        const double r = (o.size == ObjSize::large ? 0.42 : 0.28) * s;
        const auto& col = kPalette[static_cast<int>(o.color)];
        for (int y = o.cell.row * s; y < (o.cell.row + 1) * s; ++y) {
            for (int x = o.cell.col * s; x < (o.cell.col + 1) * s; ++x) {
                const double py = y + 0.5, px = x + 0.5;
                bool inside = false;
                switch (o.shape) {
                    case Shape::cube:
                        inside = std::abs(px - cx) <= r && std::abs(py - cy) <= r;
                        break;
                    case Shape::sphere:
                        inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
                        break;
                    case Shape::cylinder:
                        inside = std::abs(px - cx) <= 0.55 * r && std::abs(py - cy) <= r;
                        break;
                }
                if (inside)
                    for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = col[ch];
            }
        }
    }
    return img;
}

std::vector<ScenePair> generate_dataset(const GenConfig& cfg) {
    if (cfg.n_pairs < 1) throw ConfigError("generate_dataset: n_pairs must be >= 1");
    if (cfg.grid_size < 2) throw ConfigError("generate_dataset: grid_size must be >= 2");
    const int cap = cfg.grid_size * cfg.grid_size - 1;
    const int max_obj = std::min(cfg.max_objects, cap);
    if (cfg.min_objects < 2 || cfg.min_objects > max_obj)
        throw ConfigError("generate_dataset: need 2 <= min_objects <= max_objects <= grid^2 - 1");
    double sum = 0;
    for (double p : cfg.mix.p) {
        if (p < 0) throw ConfigError("generate_dataset: negative mix probability");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("generate_dataset: mix probabilities must sum to 1");

    std::vector<ScenePair> out;
    out.reserve(static_cast<std::size_t>(cfg.n_pairs));
    for (int i = 0; i < cfg.n_pairs; ++i) {
        std::mt19937_64 rng = pair_rng(cfg.seed, i);
        ScenePair pair;
        const std::uint64_t pair_seed = splitmix64(
            cfg.seed ^
            (0xd1b54a32d192ed03ull * (static_cast<std::uint64_t>(i) + 1)));
        pair.pair_id = "p" + hex64(pair_seed);

        pair.before.grid_size = cfg.grid_size;
        pair.before.seed = pair_seed;
        const int n_obj =
            cfg.min_objects +
            static_cast<int>(uniform_index(
                rng, static_cast<std::size_t>(max_obj - cfg.min_objects + 1)));
        std::vector<Cell> cells;
        cells.reserve(static_cast<std::size_t>(cfg.grid_size) * cfg.grid_size);
        for (int r = 0; r < cfg.grid_size; ++r)
            for (int c = 0; c < cfg.grid_size; ++c) cells.push_back({r, c});
        for (std::size_t k = cells.size() - 1; k > 0; --k)
            std::swap(cells[k], cells[uniform_index(rng, k + 1)]);
        for (int k = 0; k < n_obj; ++k) {
            ObjectSpec o = random_object(rng);
            o.cell = cells[static_cast<std::size_t>(k)];
            pair.before.objects.push_back(o);
        }
        sort_canonical(pair.before);

        double u = uniform01(rng);
        int kind = kNumChangeKinds - 1;
        double acc = 0;
        for (int k = 0; k < kNumChangeKinds; ++k) {
            acc += cfg.mix.p[static_cast<std::size_t>(k)];
            if (u < acc) {
                kind = k;
                break;
            }
        }
        ChangeOp& op = pair.change;
        op.kind = static_cast<ChangeKind>(kind);
        switch (op.kind) {
            case ChangeKind::add: {
                ObjectSpec o = random_object(rng);
                o.cell = random_free_cell(pair.before, rng);
                op.new_object = o;
                break;
            }
            case ChangeKind::remove:
                op.target_index = static_cast<int>(
                    uniform_index(rng, pair.before.objects.size()));
                break;
            case ChangeKind::move:
                op.target_index = static_cast<int>(
                    uniform_index(rng, pair.before.objects.size()));
                op.new_cell = random_free_cell(pair.before, rng);
                break;
            case ChangeKind::recolor: {
                op.target_index = static_cast<int>(
                    uniform_index(rng, pair.before.objects.size()));
                Color old = pair.before.objects[op.target_index].color;
                int shift = 1 + static_cast<int>(uniform_index(rng, kNumColors - 1));
                op.new_color = static_cast<Color>(
                    (static_cast<int>(old) + shift) % kNumColors);
                break;
            }
            case ChangeKind::no_change:
                break;
        }
        pair.after = apply_change(pair.before, op);
        pair.gt_captions.push_back(render_gt_caption(pair));
        out.push_back(std::move(pair));
    }
    return out;
}

}  // namespace cortex
