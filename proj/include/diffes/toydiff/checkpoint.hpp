#pragma once

// Checkpoint layout (little-endian):
//   magic "DFESCKPT", u32 version
//   i32 x 7 model config (image_side, patch, embed, heads, hidden, blocks, classes)
//   u32 tensor count, then per tensor: string name, i32 rows, i32 cols, f32[rows*cols]

#include <cstdint>
#include <filesystem>

#include "diffes/io.hpp"
#include "diffes/toydiff/model.hpp"

namespace diffes::toydiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const DenoiserModel& model, const std::filesystem::path& path) {
    io::Writer w(path);
    w.put_magic("DFESCKPT");
    w.put<std::uint32_t>(kCheckpointVersion);
    const auto& c = model.config();
    for (int v : {c.image_side, c.patch, c.embed, c.heads, c.hidden, c.blocks, c.classes}) w.put<std::int32_t>(v);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params().size()));
    for (const auto& t : model.params()) {
        w.put_string(t.name);
        w.put<std::int32_t>(t.rows);
        w.put<std::int32_t>(t.cols);
        w.put_array<float>(t.w);
    }
    w.close();
}

inline DenoiserModel load_checkpoint(const std::filesystem::path& path) {
    io::Reader r(path);
    r.expect_magic("DFESCKPT");
    if (r.get<std::uint32_t>() != kCheckpointVersion) throw Error(ErrorKind::CorruptFile, "unsupported checkpoint version");
    ModelConfig c;
    c.image_side = r.get<std::int32_t>();
    c.patch = r.get<std::int32_t>();
    c.embed = r.get<std::int32_t>();
    c.heads = r.get<std::int32_t>();
    c.hidden = r.get<std::int32_t>();
    c.blocks = r.get<std::int32_t>();
    c.classes = r.get<std::int32_t>();
    DenoiserModel model(c);
    const auto count = r.get<std::uint32_t>();
    if (count != model.params().size()) throw Error(ErrorKind::CorruptFile, "checkpoint tensor count mismatch");
    for (auto& t : model.params()) {
        const std::string name = r.get_string();
        const int rows = r.get<std::int32_t>();
        const int cols = r.get<std::int32_t>();
        if (name != t.name || rows != t.rows || cols != t.cols)
            throw Error(ErrorKind::CorruptFile, "checkpoint tensor mismatch at " + name);
        t.w = r.get_array<float>(t.w.size());
    }
    return model;
}

/// CRC-32 over all weights in registry order; identifies a backbone.
inline std::uint32_t model_checksum(const DenoiserModel& model) {
    std::uint32_t crc = 0;
    for (const auto& t : model.params()) crc = io::crc32_of<float>(t.w, crc);
    return crc;
}

}  // namespace diffes::toydiff
