#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eseg/train.hpp"

namespace eseg {

// ---------------------------------------------------------------------------
// Tensor container: 25-byte header, little-endian payload
//
//   bytes 0..4    magic "ESEG1"
//   bytes 5..6    format version (u16), currently 1
//   byte  7       element type (0 = f32, 1 = f64)
//   byte  8       rank, always 4
//   bytes 9..24   dims n, c, h, w (u32 each)
//   then          row-major values

namespace detail {

constexpr char kTensorMagic[5] = {'E', 'S', 'E', 'G', '1'};
constexpr std::uint16_t kTensorVersion = 1;

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
    const std::string& bytes;
    std::size_t pos = 0;
    std::string what;  // for error messages

    void need(std::size_t n) const {
        if (pos + n > bytes.size())
            fail(what, ": truncated at byte ", pos, ", needed ", n, " more of ", bytes.size());
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(bytes[pos++]);
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v = static_cast<std::uint16_t>(v | (static_cast<std::uint16_t>(
                                                    static_cast<std::uint8_t>(bytes[pos++]))
                                                << (8 * i)));
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos++])) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[pos++])) << (8 * i);
        return v;
    }
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '", path, "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open '", path, "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail("short write to '", path, "'");
}

}  // namespace detail

inline std::string tensor_to_bytes(const Tensor& t) {
    const Shape s = t.shape();
    std::string out;
    out.append(detail::kTensorMagic, sizeof detail::kTensorMagic);
    detail::put_u16(out, detail::kTensorVersion);
    out.push_back(static_cast<char>(t.dtype() == DType::F32 ? 0 : 1));
    out.push_back(4);
    for (std::int64_t d : {s.n, s.c, s.h, s.w}) {
        if (d < 1 || d > static_cast<std::int64_t>(UINT32_MAX))
            fail("tensor dim ", d, " does not fit the container's u32 dims");
        detail::put_u32(out, static_cast<std::uint32_t>(d));
    }
    if (t.dtype() == DType::F32)
        for (float v : t.data<float>()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    else
        for (double v : t.data<double>()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Tensor tensor_from_bytes(detail::ByteReader& r) {
    r.need(sizeof detail::kTensorMagic);
    if (r.bytes.compare(r.pos, sizeof detail::kTensorMagic, detail::kTensorMagic,
                        sizeof detail::kTensorMagic) != 0)
        fail(r.what, ": bad magic, not a tensor container");
    r.pos += sizeof detail::kTensorMagic;
    const auto version = r.u16();
    if (version != detail::kTensorVersion)
        fail(r.what, ": unsupported container version ", version);
    const auto elem = r.u8();
    if (elem > 1) fail(r.what, ": unknown element type code ", int(elem));
    const auto rank = r.u8();
    if (rank != 4) fail(r.what, ": rank must be 4, got ", int(rank));
    Shape s;
    s.n = r.u32();
    s.c = r.u32();
    s.h = r.u32();
    s.w = r.u32();
    if (s.elems() > (std::int64_t{1} << 33))
        fail(r.what, ": dims ", s.str(), " overflow the supported payload size");
    if (elem == 0) {
        std::vector<float> data(static_cast<std::size_t>(s.elems()));
        for (auto& v : data) v = std::bit_cast<float>(r.u32());
        return Tensor::from_f32(s, std::move(data));
    }
    std::vector<double> data(static_cast<std::size_t>(s.elems()));
    for (auto& v : data) v = std::bit_cast<double>(r.u64());
    return Tensor::from_f64(s, std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    detail::write_file(path, tensor_to_bytes(t));
}

inline Tensor load_tensor(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader r{bytes, 0, path};
    Tensor t = tensor_from_bytes(r);
    if (r.pos != bytes.size())
        fail(path, ": ", bytes.size() - r.pos, " trailing bytes after the payload");
    return t;
}

// ---------------------------------------------------------------------------
// Checkpoint: one file holding named tensors plus the training-state scalars.
// Layout: magic "ESEGCKPT", u16 version, u64 manifest offset, the tensor
// blobs back to back, then a JSON manifest naming each blob's offset.

struct Checkpoint {
    std::int64_t step = 0;
    double lr = 0.0;
    double ema_decay = 0.0;
    std::map<std::string, Tensor> tensors;
};

namespace detail {
constexpr char kCkptMagic[8] = {'E', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint16_t kCkptVersion = 1;
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out.append(detail::kCkptMagic, sizeof detail::kCkptMagic);
    detail::put_u16(out, detail::kCkptVersion);
    const std::size_t manifest_field = out.size();
    detail::put_u64(out, 0);  // patched once blobs are written

    nlohmann::json offsets = nlohmann::json::object();
    for (const auto& [name, tensor] : ckpt.tensors) {
        offsets[name] = out.size();
        out += tensor_to_bytes(tensor);
    }
    const std::uint64_t manifest_at = out.size();
    for (int i = 0; i < 8; ++i)
        out[manifest_field + static_cast<std::size_t>(i)] =
            static_cast<char>((manifest_at >> (8 * i)) & 0xff);

    nlohmann::json manifest{{"step", ckpt.step},
                            {"lr", ckpt.lr},
                            {"ema_decay", ckpt.ema_decay},
                            {"tensors", std::move(offsets)}};
    out += manifest.dump();
    detail::write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader r{bytes, 0, path};
    r.need(sizeof detail::kCkptMagic);
    if (bytes.compare(0, sizeof detail::kCkptMagic, detail::kCkptMagic,
                      sizeof detail::kCkptMagic) != 0)
        fail(path, ": bad magic, not a checkpoint");
    r.pos = sizeof detail::kCkptMagic;
    const auto version = r.u16();
    if (version != detail::kCkptVersion) fail(path, ": unsupported checkpoint version ", version);
    const std::uint64_t manifest_at = r.u64();
    if (manifest_at > bytes.size()) fail(path, ": manifest offset past end of file");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(manifest_at));
    } catch (const nlohmann::json::exception& e) {
        fail(path, ": unreadable manifest: ", e.what());
    }
    Checkpoint ckpt;
    ckpt.step = manifest.at("step").get<std::int64_t>();
    ckpt.lr = manifest.at("lr").get<double>();
    ckpt.ema_decay = manifest.at("ema_decay").get<double>();
    for (const auto& [name, offset] : manifest.at("tensors").items()) {
        detail::ByteReader tr{bytes, static_cast<std::size_t>(offset.get<std::uint64_t>()),
                              path + ":" + name};
        ckpt.tensors.emplace(name, tensor_from_bytes(tr));
    }
    return ckpt;
}

// Parameter store <-> checkpoint. Buffers live alongside parameters; EMA
// shadows are stored under an "ema/" prefix so one file restores both.
inline Checkpoint checkpoint_from_training(const ParamStore& store, const EmaState& ema,
                                           std::int64_t step, double lr) {
    Checkpoint ckpt;
    ckpt.step = step;
    ckpt.lr = lr;
    ckpt.ema_decay = ema.decay;
    for (const auto& [name, tensor] : store.values) ckpt.tensors.emplace(name, tensor);
    for (const auto& [name, tensor] : ema.shadow) ckpt.tensors.emplace("ema/" + name, tensor);
    return ckpt;
}

inline std::pair<ParamStore, EmaState> training_from_checkpoint(const Checkpoint& ckpt) {
    ParamStore store;
    EmaState ema;
    ema.decay = ckpt.ema_decay;
    for (const auto& [name, tensor] : ckpt.tensors) {
        if (name.rfind("ema/", 0) == 0)
            ema.shadow.emplace(name.substr(4), tensor);
        else
            store.values.emplace(name, tensor);
    }
    return {std::move(store), std::move(ema)};
}

// ---------------------------------------------------------------------------
// 8-bit binary rasters: PGM (P5) for label maps, PPM (P6) for images

namespace detail {

inline std::string pnm_header(const char* tag, std::int64_t w, std::int64_t h) {
    std::ostringstream ss;
    ss << tag << '\n' << w << ' ' << h << "\n255\n";
    return std::move(ss).str();
}

// reads the next whitespace-delimited integer, skipping '#' comments
inline std::int64_t pnm_int(ByteReader& r) {
    for (;;) {
        r.need(1);
        const char c = r.bytes[r.pos];
        if (c == '#') {
            while (r.pos < r.bytes.size() && r.bytes[r.pos] != '\n') ++r.pos;
        } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
            ++r.pos;
        } else {
            break;
        }
    }
    std::int64_t v = 0;
    bool any = false;
    while (r.pos < r.bytes.size() && r.bytes[r.pos] >= '0' && r.bytes[r.pos] <= '9') {
        v = v * 10 + (r.bytes[r.pos++] - '0');
        any = true;
        if (v > INT32_MAX) fail(r.what, ": raster dimension overflows");
    }
    if (!any) fail(r.what, ": expected a number at byte ", r.pos);
    return v;
}

inline std::uint8_t quantize(double v) {
    const double scaled = std::llround(v * 255.0);
    return static_cast<std::uint8_t>(scaled < 0 ? 0 : (scaled > 255 ? 255 : scaled));
}

}  // namespace detail

// labels: (1, 1, h, w) of whole numbers in [0, 255], stored verbatim
inline void save_pgm(const std::string& path, const Tensor& labels) {
    const Shape s = labels.shape();
    if (s.n != 1 || s.c != 1) fail("label raster must be (1, 1, h, w), got ", s.str());
    std::string out = detail::pnm_header("P5", s.w, s.h);
    for (std::int64_t i = 0; i < s.elems(); ++i) {
        const double v = labels.item(i);
        if (v != std::floor(v) || v < 0 || v > 255)
            fail("label value ", v, " is not an 8-bit class id");
        out.push_back(static_cast<char>(static_cast<std::uint8_t>(v)));
    }
    detail::write_file(path, out);
}

inline Tensor load_pgm(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader r{bytes, 0, path};
    if (bytes.rfind("P5", 0) != 0) fail(path, ": not a binary PGM (P5) file");
    r.pos = 2;
    const std::int64_t w = detail::pnm_int(r);
    const std::int64_t h = detail::pnm_int(r);
    const std::int64_t maxval = detail::pnm_int(r);
    if (maxval != 255) fail(path, ": only 8-bit rasters are supported, maxval ", maxval);
    r.need(1);
    ++r.pos;  // single whitespace byte after the header
    r.need(static_cast<std::size_t>(h * w));
    std::vector<float> data(static_cast<std::size_t>(h * w));
    for (auto& v : data)
        v = static_cast<float>(static_cast<std::uint8_t>(bytes[r.pos++]));
    return Tensor::from_f32({1, 1, h, w}, std::move(data));
}

// images: (1, 3, h, w) in [0, 1], quantized to bytes on save
inline void save_ppm(const std::string& path, const Tensor& image) {
    const Shape s = image.shape();
    if (s.n != 1 || s.c != 3) fail("image raster must be (1, 3, h, w), got ", s.str());
    std::string out = detail::pnm_header("P6", s.w, s.h);
    const std::int64_t plane = s.h * s.w;
    for (std::int64_t p = 0; p < plane; ++p)
        for (std::int64_t c = 0; c < 3; ++c)
            out.push_back(static_cast<char>(detail::quantize(image.item(c * plane + p))));
    detail::write_file(path, out);
}

inline Tensor load_ppm(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader r{bytes, 0, path};
    if (bytes.rfind("P6", 0) != 0) fail(path, ": not a binary PPM (P6) file");
    r.pos = 2;
    const std::int64_t w = detail::pnm_int(r);
    const std::int64_t h = detail::pnm_int(r);
    const std::int64_t maxval = detail::pnm_int(r);
    if (maxval != 255) fail(path, ": only 8-bit rasters are supported, maxval ", maxval);
    r.need(1);
    ++r.pos;
    r.need(static_cast<std::size_t>(h * w * 3));
    const std::int64_t plane = h * w;
    std::vector<float> data(static_cast<std::size_t>(3 * plane));
    for (std::int64_t p = 0; p < plane; ++p)
        for (std::int64_t c = 0; c < 3; ++c)
            data[static_cast<std::size_t>(c * plane + p)] =
                static_cast<float>(static_cast<std::uint8_t>(bytes[r.pos++])) / 255.0f;
    return Tensor::from_f32({1, 3, h, w}, std::move(data));
}

// ---------------------------------------------------------------------------
// Input plumbing

// Pads bottom-right with per-channel means until H and W divide `multiple`.
inline Tensor pad_to_multiple(const Tensor& x, std::int64_t multiple) {
    if (multiple < 1) fail("pad multiple must be positive, got ", multiple);
    const Shape s = x.shape();
    const std::int64_t h = (s.h + multiple - 1) / multiple * multiple;
    const std::int64_t w = (s.w + multiple - 1) / multiple * multiple;
    if (h == s.h && w == s.w) return x;
    return detail::pad_bottom_right(x, h, w, detail::channel_means(x));
}

inline int env_thread_cap() {
    if (const char* v = std::getenv("ESEG_THREADS")) {
        const int n = std::atoi(v);
        if (n > 0) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
}

// ---------------------------------------------------------------------------
// Synthetic shape-stamping dataset: class-colored rectangles and disks on a
// background, one shape per grid cell so no class is ever painted over.

struct SyntheticDatasetSpec {
    std::int64_t height = 64;
    std::int64_t width = 64;
    int classes = 4;  // including background 0
    int shapes_per_image = 6;
    int count = 16;
    std::uint64_t seed = 0;
};

inline void check_synthetic_spec(const SyntheticDatasetSpec& spec) {
    if (spec.classes < 2) fail("synthetic dataset needs at least 2 classes, got ", spec.classes);
    if (spec.height < 8 || spec.width < 8)
        fail("synthetic images must be at least 8x8, got ", spec.height, "x", spec.width);
    if (spec.shapes_per_image < 1) fail("need at least one shape per image");
    if (spec.count < 0) fail("dataset count must be nonnegative");
}

namespace detail {

// fixed, well-separated palette: background stays dark, classes spread hues
inline std::array<double, 3> class_color(int cls, int classes) {
    if (cls == 0) return {0.15, 0.15, 0.15};
    const double t = 2.0 * 3.14159265358979323846 * (cls - 1) / std::max(1, classes - 1);
    return {0.55 + 0.40 * std::cos(t), 0.55 + 0.40 * std::cos(t - 2.0943951023931953),
            0.55 + 0.40 * std::cos(t + 2.0943951023931953)};
}

}  // namespace detail

// One image/label pair; index selects the per-item substream of spec.seed.
inline Sample synthesize_sample(const SyntheticDatasetSpec& spec, int index) {
    check_synthetic_spec(spec);
    Rng rng = Rng(spec.seed).fork(static_cast<std::uint64_t>(index));

    std::vector<float> label(static_cast<std::size_t>(spec.height * spec.width), 0.0f);
    // grid of cells, one shape each, 1px background margin per side
    int cols = 1;
    while (cols * cols < spec.shapes_per_image) ++cols;
    const int rows = (spec.shapes_per_image + cols - 1) / cols;
    const std::int64_t cell_h = spec.height / rows;
    const std::int64_t cell_w = spec.width / cols;
    if (cell_h < 4 || cell_w < 4)
        fail("image ", spec.height, "x", spec.width, " is too small for ", spec.shapes_per_image,
             " shapes");

    for (int j = 0; j < spec.shapes_per_image; ++j) {
        const int cls = 1 + j % (spec.classes - 1);
        const std::int64_t y0 = (j / cols) * cell_h + 1;
        const std::int64_t x0 = (j % cols) * cell_w + 1;
        const std::int64_t y1 = y0 + cell_h - 2;  // exclusive
        const std::int64_t x1 = x0 + cell_w - 2;
        auto paint = [&](std::int64_t y, std::int64_t x) {
            label[static_cast<std::size_t>(y * spec.width + x)] = static_cast<float>(cls);
        };
        if (rng.bernoulli(0.5)) {
            const std::int64_t ry0 = rng.uniform_int(y0, y1 - 2);
            const std::int64_t rx0 = rng.uniform_int(x0, x1 - 2);
            const std::int64_t ry1 = rng.uniform_int(ry0 + 1, y1 - 1);
            const std::int64_t rx1 = rng.uniform_int(rx0 + 1, x1 - 1);
            for (std::int64_t y = ry0; y <= ry1; ++y)
                for (std::int64_t x = rx0; x <= rx1; ++x) paint(y, x);
        } else {
            const std::int64_t rmax = (std::min(cell_h, cell_w) - 3) / 2;
            const std::int64_t r = rmax >= 1 ? rng.uniform_int(1, rmax) : 0;
            const std::int64_t cy = rng.uniform_int(y0 + r, y1 - 1 - r);
            const std::int64_t cx = rng.uniform_int(x0 + r, x1 - 1 - r);
            for (std::int64_t y = cy - r; y <= cy + r; ++y)
                for (std::int64_t x = cx - r; x <= cx + r; ++x)
                    if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) paint(y, x);
        }
    }

    const std::int64_t plane = spec.height * spec.width;
    std::vector<float> image(static_cast<std::size_t>(3 * plane));
    for (std::int64_t p = 0; p < plane; ++p) {
        const auto color =
            detail::class_color(static_cast<int>(label[static_cast<std::size_t>(p)]),
                                spec.classes);
        for (std::int64_t c = 0; c < 3; ++c) {
            const double v = color[static_cast<std::size_t>(c)] + rng.uniform(-0.08, 0.08);
            image[static_cast<std::size_t>(c * plane + p)] =
                static_cast<float>(v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v));
        }
    }
    return {Tensor::from_f32({1, 3, spec.height, spec.width}, std::move(image)),
            Tensor::from_f32({1, 1, spec.height, spec.width}, std::move(label))};
}

namespace detail {

inline std::string item_name(const char* stem, int index, const char* ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%05d.%s", stem, index, ext);
    return buf;
}

}  // namespace detail

// Writes image/label rasters plus manifest.json into dir. Items are generated
// on env_thread_cap() workers; each item depends only on (seed, index), so the
// bytes are identical however the work is split.
inline void gen_synthetic(const SyntheticDatasetSpec& spec, const std::string& dir) {
    check_synthetic_spec(spec);
    std::filesystem::create_directories(dir);

    const int workers = std::min(env_thread_cap(), std::max(1, spec.count));
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t)
        pool.emplace_back([&, t] {
            for (int i = t; i < spec.count; i += workers) {
                const Sample s = synthesize_sample(spec, i);
                save_ppm(dir + "/" + detail::item_name("img", i, "ppm"), s.image);
                save_pgm(dir + "/" + detail::item_name("lab", i, "pgm"), s.label);
            }
        });
    for (auto& t : pool) t.join();

    nlohmann::json items = nlohmann::json::array();
    for (int i = 0; i < spec.count; ++i)
        items.push_back({{"image", detail::item_name("img", i, "ppm")},
                         {"label", detail::item_name("lab", i, "pgm")}});
    const nlohmann::json manifest{{"height", spec.height},   {"width", spec.width},
                                  {"classes", spec.classes}, {"shapes_per_image", spec.shapes_per_image},
                                  {"count", spec.count},     {"seed", spec.seed},
                                  {"items", std::move(items)}};
    detail::write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

struct Dataset {
    SyntheticDatasetSpec spec;  // as recorded in the manifest
    std::vector<Sample> samples;
};

inline Dataset load_dataset(const std::string& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail::read_file(dir + "/manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(dir, "/manifest.json: unreadable manifest: ", e.what());
    }
    Dataset ds;
    ds.spec.height = manifest.at("height").get<std::int64_t>();
    ds.spec.width = manifest.at("width").get<std::int64_t>();
    ds.spec.classes = manifest.at("classes").get<int>();
    ds.spec.shapes_per_image = manifest.at("shapes_per_image").get<int>();
    ds.spec.count = manifest.at("count").get<int>();
    ds.spec.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& item : manifest.at("items")) {
        ds.samples.push_back({load_ppm(dir + "/" + item.at("image").get<std::string>()),
                              load_pgm(dir + "/" + item.at("label").get<std::string>())});
    }
    return ds;
}

}  // namespace eseg
