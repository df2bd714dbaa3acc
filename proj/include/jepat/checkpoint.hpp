#pragma once

#include "jepat/hash.hpp"
#include "jepat/model.hpp"
#include "jepat/training.hpp"

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace jepat {

// Checkpoint file layout (little-endian):
//   magic "JPTCKPT1"
//   u32 format version (currently 1)
//   u32 config blob length, UTF-8 key=value blob (includes run.* state keys)
//   per tensor: u32 name length, name bytes, u32 rank, u64 extents[rank],
//               f32 payload in row-major order
//   u32 CRC-32 of every preceding byte

inline constexpr char kCheckpointMagic[8] = {'J', 'P', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointTruncationError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointChecksumError : CheckpointError {
    using CheckpointError::CheckpointError;
};

struct CheckpointData {
    std::string config_text;  // base config, run state stripped
    int64_t step = 0;
    int64_t opt_step = 0;
    std::array<uint64_t, 4> rng_state{};
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
};

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

inline void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

class Reader {
public:
    Reader(const std::string& buf, size_t limit) : buf_(buf), limit_(limit) {}

    template <typename T>
    T get() {
        T v;
        need(sizeof(T));
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_bytes(size_t n) {
        need(n);
        std::string out = buf_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    size_t pos() const { return pos_; }
    bool at_end() const { return pos_ == limit_; }

private:
    void need(size_t n) const {
        if (pos_ + n > limit_) throw CheckpointTruncationError("checkpoint: truncated file");
    }

    const std::string& buf_;
    size_t limit_;
    size_t pos_ = 0;
};

inline std::string compose_blob(const std::string& base, int64_t step, int64_t opt_step,
                                const std::array<uint64_t, 4>& rng) {
    std::string blob = base;
    if (!blob.empty() && blob.back() != '\n') blob.push_back('\n');
    blob += "run.step=" + std::to_string(step) + "\n";
    blob += "run.opt_step=" + std::to_string(opt_step) + "\n";
    blob += "run.rng=" + std::to_string(rng[0]) + "," + std::to_string(rng[1]) + "," + std::to_string(rng[2]) +
            "," + std::to_string(rng[3]) + "\n";
    return blob;
}

inline void split_blob(const std::string& blob, CheckpointData& out) {
    std::istringstream is(blob);
    std::string line;
    std::string base;
    while (std::getline(is, line)) {
        if (line.rfind("run.step=", 0) == 0) {
            out.step = std::stoll(line.substr(9));
        } else if (line.rfind("run.opt_step=", 0) == 0) {
            out.opt_step = std::stoll(line.substr(13));
        } else if (line.rfind("run.rng=", 0) == 0) {
            std::istringstream rs(line.substr(8));
            std::string part;
            for (auto& w : out.rng_state) {
                if (!std::getline(rs, part, ',')) throw CheckpointError("checkpoint: malformed run.rng");
                w = std::stoull(part);
            }
        } else {
            base += line;
            base.push_back('\n');
        }
    }
    out.config_text = base;
}

}  // namespace detail

inline void write_checkpoint_file(const std::string& path, const CheckpointData& data) {
    std::string buf;
    detail::put_bytes(buf, kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<uint32_t>(buf, kCheckpointVersion);
    const std::string blob = detail::compose_blob(data.config_text, data.step, data.opt_step, data.rng_state);
    detail::put<uint32_t>(buf, static_cast<uint32_t>(blob.size()));
    detail::put_bytes(buf, blob.data(), blob.size());
    for (const auto& [name, tensor] : data.tensors) {
        detail::put<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        detail::put_bytes(buf, name.data(), name.size());
        detail::put<uint32_t>(buf, static_cast<uint32_t>(tensor.shape().size()));
        for (Index e : tensor.shape()) detail::put<uint64_t>(buf, static_cast<uint64_t>(e));
        detail::put_bytes(buf, tensor.data(), static_cast<size_t>(tensor.size()) * sizeof(float));
    }
    detail::put<uint32_t>(buf, Crc32::of(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("checkpoint: cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("checkpoint: short write to " + path);
}

inline CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();
    if (buf.size() < sizeof(kCheckpointMagic) + 2 * sizeof(uint32_t) + sizeof(uint32_t)) {
        throw CheckpointTruncationError("checkpoint: file too short");
    }

    detail::Reader r(buf, buf.size() - sizeof(uint32_t));
    const std::string magic = r.get_bytes(sizeof(kCheckpointMagic));
    if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
        throw CheckpointError("checkpoint: bad magic, not a checkpoint file");
    }
    const auto version = r.get<uint32_t>();
    if (version != kCheckpointVersion) {
        throw CheckpointVersionError("checkpoint: format version " + std::to_string(version) +
                                     " not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    }

    CheckpointData data;
    const auto blob_len = r.get<uint32_t>();
    detail::split_blob(r.get_bytes(blob_len), data);

    while (!r.at_end()) {
        const auto name_len = r.get<uint32_t>();
        std::string name = r.get_bytes(name_len);
        const auto rank = r.get<uint32_t>();
        std::vector<Index> shape;
        Index total = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            const auto e = r.get<uint64_t>();
            shape.push_back(static_cast<Index>(e));
            total *= static_cast<Index>(e);
        }
        Tensor<float> t(shape);
        const std::string payload = r.get_bytes(static_cast<size_t>(total) * sizeof(float));
        std::memcpy(t.data(), payload.data(), payload.size());
        data.tensors.emplace_back(std::move(name), std::move(t));
    }

    uint32_t stored = 0;
    std::memcpy(&stored, buf.data() + buf.size() - sizeof(uint32_t), sizeof(uint32_t));
    if (Crc32::of(buf.data(), buf.size() - sizeof(uint32_t)) != stored) {
        throw CheckpointChecksumError("checkpoint: CRC mismatch, file is corrupted");
    }
    return data;
}

inline void save_checkpoint(const std::string& path, const std::string& config_text,
                            const TrainState<float>& st) {
    CheckpointData data;
    data.config_text = config_text;
    data.step = st.step;
    data.opt_step = st.opt.step;
    data.rng_state = st.rng.state();
    auto& params = const_cast<TrainState<float>&>(st);
    for (const auto& ref : param_registry(params.params)) data.tensors.emplace_back(ref.name, *ref.tensor);
    for (const auto& ref : param_registry(params.ema)) data.tensors.emplace_back("ema." + ref.name, *ref.tensor);
    auto reg = param_registry(params.params);
    for (size_t i = 0; i < reg.size(); ++i) data.tensors.emplace_back("opt.m." + reg[i].name, st.opt.m[i]);
    for (size_t i = 0; i < reg.size(); ++i) data.tensors.emplace_back("opt.v." + reg[i].name, st.opt.v[i]);
    write_checkpoint_file(path, data);
}

/// Rebuild a training state from raw checkpoint data. Every registry tensor
/// must be present with its exact shape.
inline TrainState<float> restore_train_state(const CheckpointData& data, const ModelConfig& cfg) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, tensor] : data.tensors) by_name[name] = &tensor;

    auto fill = [&](const std::string& prefix, ModelParams<float>& params) {
        for (auto& ref : param_registry(params)) {
            auto it = by_name.find(prefix + ref.name);
            if (it == by_name.end()) throw CheckpointError("checkpoint: missing tensor " + prefix + ref.name);
            if (it->second->shape() != ref.tensor->shape()) {
                throw CheckpointError("checkpoint: shape mismatch for " + prefix + ref.name + ": file has " +
                                      it->second->shape_str() + ", model needs " + ref.tensor->shape_str());
            }
            *ref.tensor = *it->second;
        }
    };

    TrainState<float> st;
    Rng scratch(0);
    st.params = init_model_params<float>(cfg, scratch);
    fill("", st.params);
    st.ema = st.params;
    fill("ema.", st.ema);
    st.opt = init_optimizer_state(st.params);
    auto reg = param_registry(st.params);
    for (size_t i = 0; i < reg.size(); ++i) {
        auto m = by_name.find("opt.m." + reg[i].name);
        auto v = by_name.find("opt.v." + reg[i].name);
        if (m == by_name.end() || v == by_name.end()) {
            throw CheckpointError("checkpoint: missing optimizer state for " + reg[i].name);
        }
        st.opt.m[i] = *m->second;
        st.opt.v[i] = *v->second;
    }
    st.opt.step = data.opt_step;
    st.step = data.step;
    st.rng = Rng(0);
    st.rng.set_state(data.rng_state);
    return st;
}

}  // namespace jepat
