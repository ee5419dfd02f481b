#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rata/errors.hpp"
#include "rata/rng.hpp"

namespace rata {

struct ParamBlock {
    std::string name;
    std::vector<int> shape;         // positive dims, row-major layout
    std::vector<double> values;     // length == product(shape)

    int64_t count() const {
        int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }
};

struct LineageEntry {
    std::string task_id;
    std::string hparams_digest;

    bool operator==(const LineageEntry&) const = default;
};

// Provenance of a checkpoint: pre-training root plus an append-only chain of
// (task, hyperparameter digest) entries. Merged checkpoints additionally
// record their parents' lineage digests and mixing coefficients.
struct Lineage {
    std::string root;               // pre-training task id, e.g. "scratch"
    std::vector<LineageEntry> chain;
    std::vector<std::string> merge_parents;  // lineage digests, merged checkpoints only
    std::vector<double> merge_lambdas;

    bool operator==(const Lineage&) const = default;
};

struct Checkpoint {
    std::vector<ParamBlock> featurizer;  // phi
    std::vector<ParamBlock> classifier;  // w
    Lineage lineage;
    int64_t step = 0;
};

namespace detail {

inline nlohmann::json lineage_to_json(const Lineage& lin) {
    nlohmann::json j;
    j["root"] = lin.root;
    auto chain = nlohmann::json::array();
    for (const auto& e : lin.chain) chain.push_back({{"task", e.task_id}, {"digest", e.hparams_digest}});
    j["chain"] = chain;
    if (!lin.merge_parents.empty()) {
        j["merge"] = {{"parents", lin.merge_parents}, {"lambdas", lin.merge_lambdas}};
    }
    return j;
}

inline Lineage lineage_from_json(const nlohmann::json& j) {
    Lineage lin;
    lin.root = j.at("root").get<std::string>();
    for (const auto& e : j.at("chain")) {
        lin.chain.push_back({e.at("task").get<std::string>(), e.at("digest").get<std::string>()});
    }
    if (j.contains("merge")) {
        lin.merge_parents = j["merge"].at("parents").get<std::vector<std::string>>();
        lin.merge_lambdas = j["merge"].at("lambdas").get<std::vector<double>>();
    }
    return lin;
}

inline void put_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64_le(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(const unsigned char* p) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

// Stable hex digest of a checkpoint's provenance; used when recording merges.
inline std::string lineage_digest(const Lineage& lin) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a64(detail::lineage_to_json(lin).dump())));
    return std::string(buf);
}

inline void validate_checkpoint(const Checkpoint& ckpt) {
    std::unordered_set<std::string> names;
    for (const auto* section : {&ckpt.featurizer, &ckpt.classifier}) {
        for (const auto& block : *section) {
            if (!names.insert(block.name).second)
                throw DataError("duplicate block name: " + block.name);
            int64_t n = 1;
            for (int d : block.shape) {
                if (d <= 0) throw DataError("non-positive dim in block " + block.name);
                n *= d;
            }
            if (n != static_cast<int64_t>(block.values.size()))
                throw DataError("shape/length mismatch in block " + block.name);
            for (double v : block.values) {
                if (!std::isfinite(v)) throw DataError("non-finite parameter in block " + block.name);
            }
        }
    }
}

// File layout, little-endian: "RATA", version 0x01, u32 header length,
// JSON header (blocks with float offsets into the payload, lineage, step),
// then the contiguous f64 payload.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    validate_checkpoint(ckpt);

    nlohmann::json header;
    auto blocks = nlohmann::json::array();
    int64_t offset = 0;
    auto add_section = [&](const char* section, const std::vector<ParamBlock>& list) {
        for (const auto& b : list) {
            blocks.push_back({{"section", section},
                              {"name", b.name},
                              {"shape", b.shape},
                              {"offset", offset},
                              {"count", b.count()}});
            offset += b.count();
        }
    };
    add_section("featurizer", ckpt.featurizer);
    add_section("classifier", ckpt.classifier);
    header["blocks"] = blocks;
    header["lineage"] = detail::lineage_to_json(ckpt.lineage);
    header["step"] = ckpt.step;
    std::string header_str = header.dump();

    std::string out;
    out.reserve(9 + header_str.size() + static_cast<size_t>(offset) * 8);
    out += "RATA";
    out.push_back('\x01');
    detail::put_u32_le(out, static_cast<uint32_t>(header_str.size()));
    out += header_str;
    for (const auto* section : {&ckpt.featurizer, &ckpt.classifier})
        for (const auto& b : *section)
            for (double v : b.values) detail::put_f64_le(out, v);

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw IoError("cannot open for writing: " + path.string());
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw IoError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

    if (bytes.size() < 9 || bytes.compare(0, 4, "RATA") != 0)
        throw DataError("bad magic: " + path.string());
    if (bytes[4] != '\x01') throw DataError("unsupported version");
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    uint32_t header_len = 0;
    for (int i = 0; i < 4; ++i) header_len |= static_cast<uint32_t>(u[5 + i]) << (8 * i);
    if (bytes.size() < 9 + static_cast<size_t>(header_len)) throw DataError("truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(9, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed header: ") + e.what());
    }

    const size_t payload_start = 9 + header_len;
    const size_t payload_bytes = bytes.size() - payload_start;

    Checkpoint ckpt;
    try {
        int64_t total = 0;
        for (const auto& jb : header.at("blocks")) {
            ParamBlock block;
            block.name = jb.at("name").get<std::string>();
            block.shape = jb.at("shape").get<std::vector<int>>();
            int64_t count = jb.at("count").get<int64_t>();
            int64_t offset = jb.at("offset").get<int64_t>();
            if (count != block.count()) throw DataError("count/shape mismatch: " + block.name);
            if (offset < 0 || static_cast<size_t>(offset + count) * 8 > payload_bytes)
                throw DataError("truncated payload: " + block.name);
            block.values.resize(static_cast<size_t>(count));
            for (int64_t i = 0; i < count; ++i)
                block.values[static_cast<size_t>(i)] =
                    detail::get_f64_le(u + payload_start + static_cast<size_t>(offset + i) * 8);
            total += count;
            auto section = jb.at("section").get<std::string>();
            if (section == "featurizer") ckpt.featurizer.push_back(std::move(block));
            else if (section == "classifier") ckpt.classifier.push_back(std::move(block));
            else throw DataError("unknown section: " + section);
        }
        if (static_cast<size_t>(total) * 8 != payload_bytes) throw DataError("payload size mismatch");
        ckpt.lineage = detail::lineage_from_json(header.at("lineage"));
        ckpt.step = header.at("step").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed header: ") + e.what());
    }
    validate_checkpoint(ckpt);
    return ckpt;
}

// True iff both checkpoints expose identical block name sets with identical
// shapes, section by section. Precondition for every merge.
inline bool validate_compatible(const Checkpoint& a, const Checkpoint& b) {
    auto section_matches = [](const std::vector<ParamBlock>& x, const std::vector<ParamBlock>& y) {
        if (x.size() != y.size()) return false;
        for (size_t i = 0; i < x.size(); ++i) {
            const ParamBlock* other = nullptr;
            for (const auto& cand : y)
                if (cand.name == x[i].name) { other = &cand; break; }
            if (other == nullptr || other->shape != x[i].shape) return false;
        }
        return true;
    };
    return section_matches(a.featurizer, b.featurizer) && section_matches(a.classifier, b.classifier);
}

// Euclidean distance over all parameters.
inline double param_distance(const Checkpoint& a, const Checkpoint& b) {
    if (!validate_compatible(a, b)) throw DataError("incompatible checkpoints");
    double sum = 0.0;
    auto accumulate = [&](const std::vector<ParamBlock>& x, const std::vector<ParamBlock>& y) {
        for (size_t i = 0; i < x.size(); ++i) {
            const ParamBlock* other = nullptr;
            for (const auto& cand : y)
                if (cand.name == x[i].name) { other = &cand; break; }
            for (size_t k = 0; k < x[i].values.size(); ++k) {
                double d = x[i].values[k] - other->values[k];
                sum += d * d;
            }
        }
    };
    accumulate(a.featurizer, b.featurizer);
    accumulate(a.classifier, b.classifier);
    return std::sqrt(sum);
}

}  // namespace rata
