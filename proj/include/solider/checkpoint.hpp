#pragma once

// Versioned training-state container.
//
// Layout, all integers little-endian:
//   "SOLCKPT1" | u32 version | u32 entry count
//   entries: u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | u64 offset | u64 nbytes
//   data blob (offsets are relative to its start)
//   u32 crc32 of every preceding byte

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "solider/config.hpp"
#include "solider/trainer.hpp"

namespace solider {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u64 = 2, bytes = 3 };

struct CheckpointEntry {
    DType dtype = DType::bytes;
    Shape shape;
    std::vector<unsigned char> payload;
};

using CheckpointTable = std::map<std::string, CheckpointEntry>;

namespace detail {

template <typename V>
CheckpointEntry make_entry(DType dtype, Shape shape, const std::vector<V>& values) {
    CheckpointEntry e;
    e.dtype = dtype;
    e.shape = std::move(shape);
    e.payload.resize(values.size() * sizeof(V));
    if (!values.empty()) std::memcpy(e.payload.data(), values.data(), e.payload.size());
    return e;
}

inline CheckpointEntry bytes_entry(const std::string& s) {
    return make_entry(DType::bytes, {s.size()}, std::vector<unsigned char>(s.begin(), s.end()));
}

template <typename V>
std::vector<V> entry_values(const CheckpointTable& t, const std::string& name, DType dtype) {
    auto it = t.find(name);
    if (it == t.end()) throw StructureMismatch("checkpoint has no tensor " + name);
    if (it->second.dtype != dtype) throw StructureMismatch("checkpoint tensor " + name + " has an unexpected dtype");
    if (it->second.payload.size() % sizeof(V)) throw CheckpointError("checkpoint tensor " + name + " has a ragged payload");
    std::vector<V> out(it->second.payload.size() / sizeof(V));
    if (!out.empty()) std::memcpy(out.data(), it->second.payload.data(), it->second.payload.size());
    return out;
}

inline std::string entry_text(const CheckpointTable& t, const std::string& name) {
    const auto v = entry_values<unsigned char>(t, name, DType::bytes);
    return {v.begin(), v.end()};
}

class Writer {
public:
    std::vector<unsigned char> buf;
    template <typename V>
    void put(V v) {
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        buf.insert(buf.end(), p, p + sizeof v);
    }
    void put_bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), b, b + n);
    }
};

class Reader {
public:
    Reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
    template <typename V>
    V get() {
        V v;
        need(sizeof v);
        std::memcpy(&v, p_ + at_, sizeof v);
        at_ += sizeof v;
        return v;
    }
    std::string get_string(std::size_t len) {
        need(len);
        std::string s(reinterpret_cast<const char*>(p_ + at_), len);
        at_ += len;
        return s;
    }
    std::size_t position() const { return at_; }

private:
    void need(std::size_t k) const {
        if (at_ + k > n_) throw CheckpointError("checkpoint table is truncated");
    }
    const unsigned char* p_;
    std::size_t n_, at_ = 0;
};

inline std::uint32_t crc(const unsigned char* p, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, p, chunk);
        p += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace detail

/// Serializes a table of named tensors; the trailer checksum covers
/// everything before it.
inline std::vector<unsigned char> encode_checkpoint(const CheckpointTable& table) {
    detail::Writer w;
    w.put_bytes("SOLCKPT1", 8);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(table.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, e] : table) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name.data(), name.size());
        w.put<std::uint8_t>(static_cast<std::uint8_t>(e.dtype));
        w.put<std::uint32_t>(static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) w.put<std::uint64_t>(d);
        w.put<std::uint64_t>(offset);
        w.put<std::uint64_t>(e.payload.size());
        offset += e.payload.size();
    }
    for (const auto& [_, e] : table) w.put_bytes(e.payload.data(), e.payload.size());
    w.put<std::uint32_t>(detail::crc(w.buf.data(), w.buf.size()));
    return std::move(w.buf);
}

/// Validates checksum, magic and version before decoding anything.
inline CheckpointTable decode_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 8 + 4 + 4 + 4) throw CheckpointError("checkpoint checksum mismatch: file is truncated");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);
    if (detail::crc(bytes.data(), body) != stored) throw CheckpointError("checkpoint checksum mismatch: file is corrupt or truncated");
    if (std::memcmp(bytes.data(), "SOLCKPT1", 8) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
    detail::Reader r(bytes.data() + 8, body - 8);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
    const auto count = r.get<std::uint32_t>();
    struct Pending {
        std::string name;
        CheckpointEntry entry;
        std::uint64_t offset, nbytes;
    };
    std::vector<Pending> pending;
    for (std::uint32_t i = 0; i < count; ++i) {
        Pending p;
        p.name = r.get_string(r.get<std::uint32_t>());
        p.entry.dtype = static_cast<DType>(r.get<std::uint8_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) p.entry.shape.push_back(r.get<std::uint64_t>());
        p.offset = r.get<std::uint64_t>();
        p.nbytes = r.get<std::uint64_t>();
        pending.push_back(std::move(p));
    }
    const std::size_t data_start = 8 + r.position();
    CheckpointTable table;
    for (auto& p : pending) {
        if (data_start + p.offset + p.nbytes > body) throw CheckpointError("checkpoint tensor " + p.name + " lies outside the file");
        const auto* src = bytes.data() + data_start + p.offset;
        p.entry.payload.assign(src, src + p.nbytes);
        table.emplace(std::move(p.name), std::move(p.entry));
    }
    return table;
}

/// Full configuration text for a training configuration.
inline Config to_config(const TrainConfig& t) {
    Config c;
    auto num = [](double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    };
    auto list = [](const std::vector<std::size_t>& v) {
        std::string s;
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
        return s;
    };
    c.set("seed", std::to_string(t.seed));
    c.set("data.image_h", std::to_string(t.backbone.image_h));
    c.set("data.image_w", std::to_string(t.backbone.image_w));
    c.set("model.patch_size", std::to_string(t.backbone.patch_size));
    c.set("model.embed_dim", std::to_string(t.backbone.embed_dim));
    c.set("model.depths", list(t.backbone.depths));
    c.set("model.heads", list(t.backbone.heads));
    c.set("model.window", std::to_string(t.backbone.window_size));
    c.set("model.mlp_ratio", std::to_string(t.backbone.mlp_ratio));
    c.set("model.shifted_windows", t.backbone.shifted_windows ? "true" : "false");
    c.set("model.controller_hidden", std::to_string(t.backbone.controller_hidden));
    c.set("model.dino_hidden", std::to_string(t.dino_head.hidden));
    c.set("model.prototypes", std::to_string(t.dino_head.prototypes));
    c.set("model.semantic_blocks", std::to_string(t.semantic.blocks));
    c.set("model.semantic_hidden", std::to_string(t.semantic.hidden));
    c.set("model.parts", std::to_string(t.semantic.parts));
    c.set("labeler.kmeans_restarts", std::to_string(t.labeler.kmeans.restarts));
    c.set("labeler.kmeans_max_iter", std::to_string(t.labeler.kmeans.max_iter));
    c.set("train.batch_size", std::to_string(t.batch_size));
    c.set("train.phase1_epochs", std::to_string(t.phase1_epochs));
    c.set("train.phase2_epochs", std::to_string(t.phase2_epochs));
    c.set("train.lr", num(t.lr));
    c.set("train.phase2_lr_ratio", num(t.phase2_lr_ratio));
    c.set("train.lr_min", num(t.lr_min));
    c.set("train.momentum", num(t.momentum));
    c.set("train.weight_decay", num(t.weight_decay));
    c.set("train.ema_momentum", num(t.ema_momentum));
    c.set("train.center_momentum", num(t.center_momentum));
    c.set("train.temp_student", num(t.temp_student));
    c.set("train.temp_teacher", num(t.temp_teacher));
    c.set("train.alpha", num(t.weights.alpha));
    c.set("train.lambda_dist", t.lambda_dist.to_string());
    c.set("train.masking", t.masking ? "true" : "false");
    c.set("augment.crop_min_scale", num(t.augment.crop_min_scale));
    c.set("augment.crop_max_scale", num(t.augment.crop_max_scale));
    c.set("augment.flip_prob", num(t.augment.flip_prob));
    c.set("augment.brightness", num(t.augment.brightness));
    c.set("augment.contrast", num(t.augment.contrast));
    c.set("augment.saturation", num(t.augment.saturation));
    return c;
}

namespace detail {

inline constexpr std::size_t kStepFields = 9;

inline std::vector<double> pack_steps(const std::vector<LossReport>& steps) {
    std::vector<double> v;
    for (const auto& r : steps) {
        const double f[kStepFields] = {static_cast<double>(r.step), static_cast<double>(r.epoch), static_cast<double>(r.phase),
                                       r.lambda_used, r.l_dino, r.l_sm, r.total, r.lr, static_cast<double>(r.degenerate_count)};
        v.insert(v.end(), f, f + kStepFields);
    }
    return v;
}

inline std::vector<LossReport> unpack_steps(const std::vector<double>& v) {
    if (v.size() % kStepFields) throw CheckpointError("checkpoint step log is malformed");
    std::vector<LossReport> out;
    for (std::size_t i = 0; i < v.size(); i += kStepFields) {
        LossReport r;
        r.step = static_cast<std::size_t>(v[i]);
        r.epoch = static_cast<std::size_t>(v[i + 1]);
        r.phase = static_cast<Phase>(static_cast<int>(v[i + 2]));
        r.lambda_used = v[i + 3];
        r.l_dino = v[i + 4];
        r.l_sm = v[i + 5];
        r.total = v[i + 6];
        r.lr = v[i + 7];
        r.degenerate_count = static_cast<std::size_t>(v[i + 8]);
        out.push_back(r);
    }
    return out;
}

inline std::vector<double> pack_epochs(const std::vector<EpochReport>& epochs) {
    std::vector<double> v;
    for (const auto& e : epochs) {
        std::uint64_t hash = e.student_hash;
        double hash_bits;
        std::memcpy(&hash_bits, &hash, sizeof hash);
        const double f[] = {static_cast<double>(e.phase), static_cast<double>(e.epoch), e.l_dino, e.l_sm, e.total, e.mean_lambda,
                            static_cast<double>(e.degenerate_count), hash_bits};
        v.insert(v.end(), std::begin(f), std::end(f));
    }
    return v;
}

inline std::vector<EpochReport> unpack_epochs(const std::vector<double>& v) {
    if (v.size() % 8) throw CheckpointError("checkpoint epoch log is malformed");
    std::vector<EpochReport> out;
    for (std::size_t i = 0; i < v.size(); i += 8) {
        EpochReport e;
        e.phase = static_cast<Phase>(static_cast<int>(v[i]));
        e.epoch = static_cast<std::size_t>(v[i + 1]);
        e.l_dino = v[i + 2];
        e.l_sm = v[i + 3];
        e.total = v[i + 4];
        e.mean_lambda = v[i + 5];
        e.degenerate_count = static_cast<std::size_t>(v[i + 6]);
        std::memcpy(&e.student_hash, &v[i + 7], sizeof e.student_hash);
        out.push_back(e);
    }
    return out;
}

inline void put_params(CheckpointTable& t, const std::string& prefix, const ParamSet<Real>& ps) {
    for (const auto& [name, p] : ps.entries()) t[prefix + name] = make_entry(DType::f32, p.shape(), p.data());
}

/// Checks the names, shapes and dtypes in the table against ps without
/// writing. Extra tensors under the prefix are also a mismatch.
inline void check_params(const CheckpointTable& t, const std::string& prefix, const ParamSet<Real>& ps) {
    for (const auto& [name, p] : ps.entries()) {
        auto it = t.find(prefix + name);
        if (it == t.end()) throw StructureMismatch("checkpoint has no tensor " + prefix + name);
        if (it->second.dtype != DType::f32 || it->second.shape != p.shape())
            throw StructureMismatch("checkpoint tensor " + prefix + name + " has shape " + shape_str(it->second.shape) +
                                    ", model expects " + shape_str(p.shape()));
    }
    for (auto it = t.lower_bound(prefix); it != t.end() && it->first.starts_with(prefix); ++it)
        if (!ps.contains(it->first.substr(prefix.size())))
            throw StructureMismatch("checkpoint tensor " + it->first + " has no counterpart in the model");
}

inline void load_params(const CheckpointTable& t, const std::string& prefix, ParamSet<Real>& ps) {
    for (auto& [name, p] : ps.entries()) p.data() = entry_values<Real>(t, prefix + name, DType::f32);
}

}  // namespace detail

inline CheckpointTable checkpoint_table(const TrainState& st) {
    CheckpointTable t;
    detail::put_params(t, "student/", st.student_params());
    detail::put_params(t, "teacher/", st.teacher_params());
    t["teacher_center"] = detail::make_entry(DType::f32, st.teacher.center.shape(), st.teacher.center.data());
    for (const auto& [name, buf] : st.optimizer.buffers) t["optim/" + name] = detail::make_entry(DType::f32, {buf.size()}, buf);
    const auto& bn = st.student.semantic_head.bn_stats;
    for (std::size_t i = 0; i < bn.size(); ++i) {
        t["bn/" + std::to_string(i) + "/running_mean"] = detail::make_entry(DType::f32, {bn[i].running_mean.size()}, bn[i].running_mean);
        t["bn/" + std::to_string(i) + "/running_var"] = detail::make_entry(DType::f32, {bn[i].running_var.size()}, bn[i].running_var);
    }
    std::vector<double> norm(st.norm.mean.begin(), st.norm.mean.end());
    norm.insert(norm.end(), st.norm.stddev.begin(), st.norm.stddev.end());
    t["meta/norm"] = detail::make_entry(DType::f64, {6}, norm);
    const std::vector<std::uint64_t> counters = {static_cast<std::uint64_t>(st.phase), st.epoch, st.step_in_epoch, st.global_step};
    t["meta/counters"] = detail::make_entry(DType::u64, {4}, counters);
    t["meta/lambda_rng"] = detail::bytes_entry(st.lambda_rng.state());
    t["meta/config"] = detail::bytes_entry(to_config(st.cfg).serialize());
    const auto steps = detail::pack_steps(st.steps);
    t["log/steps"] = detail::make_entry(DType::f64, {steps.size()}, steps);
    const auto epochs = detail::pack_epochs(st.epochs);
    t["log/epochs"] = detail::make_entry(DType::f64, {epochs.size()}, epochs);
    return t;
}

inline void checkpoint_save(const TrainState& st, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(checkpoint_table(st));
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline CheckpointTable read_checkpoint_table(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

/// Configuration stored in a checkpoint.
inline Config checkpoint_config(const CheckpointTable& t) {
    Config c;
    c.merge_text(detail::entry_text(t, "meta/config"), "checkpoint config");
    return c;
}

/// Rebuilds a state of the structure `cfg` describes from a decoded table.
/// Every tensor is validated before the state is assembled.
inline TrainState state_from_table(const CheckpointTable& t, const TrainConfig& cfg) {
    auto norm_v = detail::entry_values<double>(t, "meta/norm", DType::f64);
    if (norm_v.size() != 6) throw CheckpointError("checkpoint normalization record is malformed");
    NormStats norm;
    for (std::size_t c = 0; c < 3; ++c) {
        norm.mean[c] = norm_v[c];
        norm.stddev[c] = norm_v[3 + c];
    }
    TrainState st = init_train_state(cfg, norm);
    auto sp = st.student_params();
    auto tp = st.teacher_params();
    detail::check_params(t, "student/", sp);
    detail::check_params(t, "teacher/", tp);
    const auto center = detail::entry_values<Real>(t, "teacher_center", DType::f32);
    if (center.size() != st.teacher.center.numel())
        throw StructureMismatch("checkpoint tensor teacher_center has " + std::to_string(center.size()) + " values, model expects " +
                                std::to_string(st.teacher.center.numel()));
    std::map<std::string, std::vector<Real>> buffers;
    for (auto it = t.lower_bound("optim/"); it != t.end() && it->first.starts_with("optim/"); ++it) {
        const std::string name = it->first.substr(6);
        if (!sp.contains(name)) throw StructureMismatch("checkpoint tensor " + it->first + " has no counterpart in the model");
        auto v = detail::entry_values<Real>(t, it->first, DType::f32);
        if (v.size() != sp.at(name).numel()) throw StructureMismatch("checkpoint tensor " + it->first + " has the wrong size");
        buffers.emplace(name, std::move(v));
    }
    auto& bn = st.student.semantic_head.bn_stats;
    std::vector<std::pair<std::vector<Real>, std::vector<Real>>> bn_values;
    for (std::size_t i = 0; i < bn.size(); ++i) {
        const std::string base = "bn/" + std::to_string(i) + "/running_";
        auto m = detail::entry_values<Real>(t, base + "mean", DType::f32);
        auto v = detail::entry_values<Real>(t, base + "var", DType::f32);
        if (m.size() != bn[i].running_mean.size() || v.size() != bn[i].running_var.size())
            throw StructureMismatch("checkpoint tensor " + base + "mean has the wrong size");
        bn_values.emplace_back(std::move(m), std::move(v));
    }
    const auto counters = detail::entry_values<std::uint64_t>(t, "meta/counters", DType::u64);
    if (counters.size() != 4 || counters[0] > 1) throw CheckpointError("checkpoint counters are malformed");
    Rng lambda_rng;
    lambda_rng.set_state(detail::entry_text(t, "meta/lambda_rng"));
    auto steps = detail::unpack_steps(detail::entry_values<double>(t, "log/steps", DType::f64));
    auto epochs = detail::unpack_epochs(detail::entry_values<double>(t, "log/epochs", DType::f64));

    detail::load_params(t, "student/", sp);
    detail::load_params(t, "teacher/", tp);
    st.teacher.center = Tensor<Real>(st.teacher.center.shape(), center);
    st.optimizer.buffers = std::move(buffers);
    for (std::size_t i = 0; i < bn.size(); ++i) {
        bn[i].running_mean = std::move(bn_values[i].first);
        bn[i].running_var = std::move(bn_values[i].second);
    }
    if (static_cast<Phase>(counters[0]) == Phase::solider) begin_finetune(st);
    st.epoch = counters[1];
    st.step_in_epoch = counters[2];
    st.global_step = counters[3];
    st.lambda_rng = lambda_rng;
    st.steps = std::move(steps);
    st.epochs = std::move(epochs);
    return st;
}

/// Restores the state exactly as saved, structure taken from the stored
/// configuration.
inline TrainState checkpoint_load(const std::filesystem::path& path) {
    const auto t = read_checkpoint_table(path);
    return state_from_table(t, train_config_from(checkpoint_config(t)));
}

/// Restores tensors and counters into the structure `cfg` describes; any
/// tensor that does not fit raises StructureMismatch naming it.
inline TrainState checkpoint_load(const std::filesystem::path& path, const TrainConfig& cfg) {
    return state_from_table(read_checkpoint_table(path), cfg);
}

}  // namespace solider
