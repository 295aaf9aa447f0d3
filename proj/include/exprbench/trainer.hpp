#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "exprbench/data.hpp"
#include "exprbench/network.hpp"
#include "exprbench/preprocess.hpp"

namespace exprbench {

enum class EvalMode { center_crop, ten_crop_mean };

inline const char* eval_mode_name(EvalMode m) {
    return m == EvalMode::center_crop ? "center_crop" : "ten_crop_mean";
}

inline EvalMode parse_eval_mode(const std::string& s) {
    if (s == "center_crop")
        return EvalMode::center_crop;
    if (s == "ten_crop_mean")
        return EvalMode::ten_crop_mean;
    throw std::invalid_argument("unknown eval mode: " + s);
}

struct TrainConfig {
    int batch_size = 50;
    double momentum = 0.9;
    double lr = 0.005;
    double weight_decay = 1e-5;
    int max_epochs = 80;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
    EvalMode eval_mode = EvalMode::ten_crop_mean;
    int threads = 1;
    bool deterministic = false; // forces a single-threaded bit-stable run
    SplitBy split_by = SplitBy::source;

    bool operator==(const TrainConfig&) const = default;

    void validate() const {
        if (batch_size < 1)
            throw std::invalid_argument("train: batch_size must be >= 1");
        if (lr <= 0.0 || momentum < 0.0 || weight_decay < 0.0)
            throw std::invalid_argument("train: rates must be positive");
        if (max_epochs < 1)
            throw std::invalid_argument("train: max_epochs must be >= 1");
        if (val_fraction <= 0.0 || val_fraction >= 1.0)
            throw std::invalid_argument("train: val_fraction must be in (0,1)");
        if (threads < 1)
            throw std::invalid_argument("train: threads must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_accuracy = 0.0;
};

// ---------------------------------------------------------------------------
// SGD with momentum and coupled L2 weight decay:
//   v <- momentum*v - lr*(g + weight_decay*w);  w <- w + v

template <class T>
inline void sgd_update(T& w, T g, T& v, double lr, double momentum,
                       double weight_decay) {
    v = static_cast<T>(momentum * static_cast<double>(v) -
                       lr * (static_cast<double>(g) +
                             weight_decay * static_cast<double>(w)));
    w = static_cast<T>(static_cast<double>(w) + static_cast<double>(v));
}

template <class T>
void sgd_step(Network<T>& net, const std::vector<ParamBlock<T>>& grads,
              std::vector<ParamBlock<T>>& velocity, const TrainConfig& cfg) {
    if (grads.size() != net.layer_count() ||
        velocity.size() != net.layer_count())
        throw std::invalid_argument("sgd_step: block count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto ref = net.param_ref(i);
        if (!ref.w)
            continue;
        const Tensor<T>& gw = grads[i].w;
        for (std::size_t k = 0; k < gw.size(); ++k)
            if (!std::isfinite(static_cast<double>(gw[k])))
                throw std::runtime_error("sgd_step: non-finite gradient in layer " +
                                         std::to_string(i));
        for (T gb : grads[i].b)
            if (!std::isfinite(static_cast<double>(gb)))
                throw std::runtime_error("sgd_step: non-finite gradient in layer " +
                                         std::to_string(i));
        T* w = ref.w->data();
        T* v = velocity[i].w.data();
        const T* g = gw.data();
        for (std::size_t k = 0; k < gw.size(); ++k)
            sgd_update(w[k], g[k], v[k], cfg.lr, cfg.momentum,
                       cfg.weight_decay);
        for (std::size_t k = 0; k < grads[i].b.size(); ++k)
            sgd_update((*ref.b)[k], grads[i].b[k], velocity[i].b[k], cfg.lr,
                       cfg.momentum, cfg.weight_decay);
    }
}

// ---------------------------------------------------------------------------
// checkpoint file format (little-endian, values stored as f32):
//
//   "EXPB"  magic
//   u32     format version (1)
//   u32+s   architecture name
//   u32+s   architecture text (canonical format_spec output)
//   u32     epoch
//   u64     rng state
//   u32     record count, then per parameter layer:
//             u32 dims[4], u32 bias_len, f32 w[...], f32 b[...]
//   u64     fnv1a-64 checksum of all preceding bytes

struct ParamRecord {
    std::array<int, 4> shape{};
    std::vector<float> w;
    std::vector<float> b;
};

struct Checkpoint {
    std::string arch_name;
    std::string arch_text;
    std::uint32_t epoch = 0;
    std::uint64_t rng_state = 0;
    std::vector<ParamRecord> records;
};

namespace detail {

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

struct HashedWriter {
    std::ofstream out;
    std::uint64_t hash = kFnvOffset;

    explicit HashedWriter(const std::string& path)
        : out(path, std::ios::binary) {
        if (!out)
            throw std::runtime_error("checkpoint: cannot write " + path);
    }
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t k = 0; k < n; ++k) {
            hash ^= c[k];
            hash *= kFnvPrime;
        }
        out.write(reinterpret_cast<const char*>(p),
                  static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) {
        unsigned char buf[4];
        for (int k = 0; k < 4; ++k)
            buf[k] = static_cast<unsigned char>(v >> (8 * k));
        bytes(buf, 4);
    }
    void u64(std::uint64_t v) {
        unsigned char buf[8];
        for (int k = 0; k < 8; ++k)
            buf[k] = static_cast<unsigned char>(v >> (8 * k));
        bytes(buf, 8);
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
};

struct HashedReader {
    std::ifstream in;
    std::uint64_t hash = kFnvOffset;
    std::string path;

    explicit HashedReader(const std::string& p) : in(p, std::ios::binary),
                                                  path(p) {
        if (!in)
            throw std::runtime_error("checkpoint: cannot open " + p);
    }
    void bytes(void* p, std::size_t n) {
        in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw std::runtime_error("checkpoint: truncated file " + path);
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t k = 0; k < n; ++k) {
            hash ^= c[k];
            hash *= kFnvPrime;
        }
    }
    std::uint32_t u32() {
        unsigned char buf[4];
        bytes(buf, 4);
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k)
            v |= static_cast<std::uint32_t>(buf[k]) << (8 * k);
        return v;
    }
    std::uint64_t u64() {
        unsigned char buf[8];
        bytes(buf, 8);
        std::uint64_t v = 0;
        for (int k = 0; k < 8; ++k)
            v |= static_cast<std::uint64_t>(buf[k]) << (8 * k);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        std::uint32_t n = u32();
        if (n > (1u << 20))
            throw std::runtime_error("checkpoint: implausible string length in " +
                                     path);
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
};

} // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    detail::HashedWriter w(path);
    w.bytes("EXPB", 4);
    w.u32(1);
    w.str(ckpt.arch_name);
    w.str(ckpt.arch_text);
    w.u32(ckpt.epoch);
    w.u64(ckpt.rng_state);
    w.u32(static_cast<std::uint32_t>(ckpt.records.size()));
    for (const ParamRecord& r : ckpt.records) {
        for (int d : r.shape)
            w.u32(static_cast<std::uint32_t>(d));
        w.u32(static_cast<std::uint32_t>(r.b.size()));
        for (float v : r.w)
            w.f32(v);
        for (float v : r.b)
            w.f32(v);
    }
    std::uint64_t digest = w.hash;
    w.u64(digest);
    w.out.close();
    if (!w.out)
        throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    detail::HashedReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "EXPB")
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t version = r.u32();
    if (version != 1)
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(version) + " in " + path);
    Checkpoint ckpt;
    ckpt.arch_name = r.str();
    ckpt.arch_text = r.str();
    ckpt.epoch = r.u32();
    ckpt.rng_state = r.u64();
    std::uint32_t count = r.u32();
    ckpt.records.resize(count);
    for (ParamRecord& rec : ckpt.records) {
        std::size_t len = 1;
        for (int& d : rec.shape) {
            d = static_cast<int>(r.u32());
            if (d < 0 || d > (1 << 24))
                throw std::runtime_error("checkpoint: implausible dims in " +
                                         path);
            len *= static_cast<std::size_t>(d);
        }
        std::uint32_t blen = r.u32();
        rec.w.resize(len);
        rec.b.resize(blen);
        for (float& v : rec.w)
            v = r.f32();
        for (float& v : rec.b)
            v = r.f32();
    }
    std::uint64_t expect = r.hash;
    std::uint64_t stored = r.u64();
    if (stored != expect)
        throw std::runtime_error("checkpoint: checksum mismatch in " + path);
    return ckpt;
}

template <class T>
Checkpoint checkpoint_from_network(const Network<T>& net, std::uint32_t epoch,
                                   std::uint64_t rng_state) {
    Checkpoint ckpt;
    ckpt.arch_name = net.spec().name;
    ckpt.arch_text = format_spec(net.spec());
    ckpt.epoch = epoch;
    ckpt.rng_state = rng_state;
    auto& mutable_net = const_cast<Network<T>&>(net);
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        auto ref = mutable_net.param_ref(i);
        if (!ref.w)
            continue;
        ParamRecord rec;
        rec.shape = ref.w->shape();
        rec.w.resize(ref.w->size());
        for (std::size_t k = 0; k < rec.w.size(); ++k)
            rec.w[k] = static_cast<float>((*ref.w)[k]);
        rec.b.resize(ref.b->size());
        for (std::size_t k = 0; k < rec.b.size(); ++k)
            rec.b[k] = static_cast<float>((*ref.b)[k]);
        ckpt.records.push_back(std::move(rec));
    }
    return ckpt;
}

// Copies checkpoint records into pre-shaped per-layer blocks (net params or
// velocity). The architecture text must match exactly.
template <class T>
void checkpoint_into_blocks(const Checkpoint& ckpt,
                            const ArchitectureSpec& spec,
                            std::vector<typename Network<T>::ParamRef> refs) {
    if (ckpt.arch_text != format_spec(spec))
        throw std::runtime_error(
            "checkpoint: architecture mismatch (checkpoint built for '" +
            ckpt.arch_name + "')");
    std::size_t rec = 0;
    for (auto& ref : refs) {
        if (!ref.w)
            continue;
        if (rec >= ckpt.records.size())
            throw std::runtime_error("checkpoint: missing parameter records");
        const ParamRecord& r = ckpt.records[rec++];
        if (r.shape != ref.w->shape() || r.b.size() != ref.b->size())
            throw std::runtime_error("checkpoint: parameter shape mismatch");
        for (std::size_t k = 0; k < r.w.size(); ++k)
            (*ref.w)[k] = static_cast<T>(r.w[k]);
        for (std::size_t k = 0; k < r.b.size(); ++k)
            (*ref.b)[k] = static_cast<T>(r.b[k]);
    }
    if (rec != ckpt.records.size())
        throw std::runtime_error("checkpoint: extra parameter records");
}

template <class T>
void apply_checkpoint(const Checkpoint& ckpt, Network<T>& net) {
    std::vector<typename Network<T>::ParamRef> refs;
    for (std::size_t i = 0; i < net.layer_count(); ++i)
        refs.push_back(net.param_ref(i));
    checkpoint_into_blocks<T>(ckpt, net.spec(), std::move(refs));
}

template <class T>
Network<T> network_from_checkpoint(const Checkpoint& ckpt) {
    ArchitectureSpec spec = parse_spec(ckpt.arch_text, ckpt.arch_name);
    Network<T> net(spec);
    apply_checkpoint(ckpt, net);
    return net;
}

// ---------------------------------------------------------------------------
// shared batching helpers

namespace detail {

// Contiguous chunking of [0,total) over at most `threads` workers; fn runs
// as fn(chunk_index, begin, end). Used so reductions can happen in a fixed
// chunk order afterwards.
inline std::vector<std::pair<std::size_t, std::size_t>>
make_chunks(std::size_t total, int threads) {
    std::size_t k = std::min<std::size_t>(std::max(threads, 1), total);
    std::vector<std::pair<std::size_t, std::size_t>> chunks;
    if (total == 0)
        return chunks;
    for (std::size_t i = 0; i < k; ++i) {
        std::size_t b = total * i / k;
        std::size_t e = total * (i + 1) / k;
        if (b != e)
            chunks.emplace_back(b, e);
    }
    return chunks;
}

template <class Fn>
void run_chunks(const std::vector<std::pair<std::size_t, std::size_t>>& chunks,
                Fn&& fn) {
    if (chunks.size() <= 1) {
        for (std::size_t i = 0; i < chunks.size(); ++i)
            fn(i, chunks[i].first, chunks[i].second);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(chunks.size());
    std::vector<std::exception_ptr> errors(chunks.size());
    for (std::size_t i = 0; i < chunks.size(); ++i)
        pool.emplace_back([&, i]() {
            try {
                fn(i, chunks[i].first, chunks[i].second);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        });
    for (auto& t : pool)
        t.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

template <class T>
Tensor<T> batch_tensor(const std::vector<const GrayImage*>& imgs, int c, int h,
                       int w) {
    Tensor<T> x(static_cast<int>(imgs.size()), c, h, w);
    const std::size_t per = static_cast<std::size_t>(c) * h * w;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i]->width != w || imgs[i]->height != h)
            throw std::invalid_argument("batch: image size mismatch");
        standardize_into(*imgs[i], x.data() + i * per);
    }
    return x;
}

template <class T>
void add_blocks(std::vector<ParamBlock<T>>& dst,
                const std::vector<ParamBlock<T>>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].empty())
            continue;
        T* d = dst[i].w.data();
        const T* s = src[i].w.data();
        for (std::size_t k = 0; k < dst[i].w.size(); ++k)
            d[k] += s[k];
        for (std::size_t k = 0; k < dst[i].b.size(); ++k)
            dst[i].b[k] += src[i].b[k];
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
    double accuracy = 0.0;
    std::array<std::array<std::int64_t, 7>, 7> confusion{}; // [true][pred]
    std::int64_t total = 0;
};

// Scores 48x48 sources: center_crop uses the plain center crop, ten_crop_mean
// averages softmax over the ten augmentation crops. `logits_of` maps a
// standardized batch tensor to logits.
template <class T, class LogitsFn>
EvalResult evaluate_fn(LogitsFn&& logits_of,
                       std::span<const Sample* const> sources, EvalMode mode,
                       int batch_size = 50) {
    EvalResult res;
    if (sources.empty())
        return res;
    const int crops_per = mode == EvalMode::ten_crop_mean ? 10 : 1;
    std::vector<GrayImage> crops;
    crops.reserve(sources.size() * static_cast<std::size_t>(crops_per));
    for (const Sample* s : sources) {
        if (s->label < 0 || s->label > 6)
            throw std::invalid_argument("evaluate: class id out of range");
        if (s->image.width != kFaceSize || s->image.height != kFaceSize)
            throw std::invalid_argument("evaluate: sources must be 48x48");
        if (mode == EvalMode::ten_crop_mean) {
            for (Sample& child : augment(*s))
                crops.push_back(std::move(child.image));
        } else {
            crops.push_back(center_crop42(s->image));
        }
    }
    const std::size_t n_crops = crops.size();
    std::vector<double> probs(n_crops * 7, 0.0);
    for (std::size_t b = 0; b < n_crops;
         b += static_cast<std::size_t>(batch_size)) {
        std::size_t e = std::min(n_crops, b + static_cast<std::size_t>(batch_size));
        std::vector<const GrayImage*> ptrs;
        ptrs.reserve(e - b);
        for (std::size_t k = b; k < e; ++k)
            ptrs.push_back(&crops[k]);
        Tensor<T> x = detail::batch_tensor<T>(ptrs, 1, kCropSize, kCropSize);
        Tensor<T> logits = logits_of(x);
        Tensor<T> p = softmax_rows(logits);
        for (std::size_t k = b; k < e; ++k)
            for (int j = 0; j < 7; ++j)
                probs[k * 7 + j] = static_cast<double>(
                    p[(k - b) * 7 + static_cast<std::size_t>(j)]);
    }
    for (std::size_t s = 0; s < sources.size(); ++s) {
        std::array<double, 7> avg{};
        for (int cidx = 0; cidx < crops_per; ++cidx)
            for (int j = 0; j < 7; ++j)
                avg[static_cast<std::size_t>(j)] +=
                    probs[(s * crops_per + cidx) * 7 + static_cast<std::size_t>(j)];
        int pred = 0;
        for (int j = 1; j < 7; ++j)
            if (avg[static_cast<std::size_t>(j)] >
                avg[static_cast<std::size_t>(pred)])
                pred = j;
        ++res.confusion[static_cast<std::size_t>(sources[s]->label)]
                       [static_cast<std::size_t>(pred)];
    }
    res.total = static_cast<std::int64_t>(sources.size());
    std::int64_t correct = 0;
    for (int j = 0; j < 7; ++j)
        correct += res.confusion[static_cast<std::size_t>(j)]
                                [static_cast<std::size_t>(j)];
    res.accuracy = static_cast<double>(correct) / static_cast<double>(res.total);
    return res;
}

template <class T>
EvalResult evaluate(const Network<T>& net, const Dataset& sources,
                    EvalMode mode, int threads = 1, int batch_size = 50) {
    std::vector<const Sample*> ptrs;
    ptrs.reserve(sources.samples.size());
    for (const Sample& s : sources.samples)
        ptrs.push_back(&s);
    auto chunks = detail::make_chunks(ptrs.size(), threads);
    std::vector<EvalResult> parts(chunks.size());
    detail::run_chunks(chunks, [&](std::size_t ci, std::size_t b,
                                   std::size_t e) {
        parts[ci] = evaluate_fn<T>(
            [&net](const Tensor<T>& x) { return net.forward(x, Mode::eval); },
            std::span<const Sample* const>(ptrs.data() + b, e - b), mode,
            batch_size);
    });
    EvalResult res;
    for (const EvalResult& p : parts) {
        res.total += p.total;
        for (int i = 0; i < 7; ++i)
            for (int j = 0; j < 7; ++j)
                res.confusion[static_cast<std::size_t>(i)]
                             [static_cast<std::size_t>(j)] +=
                    p.confusion[static_cast<std::size_t>(i)]
                               [static_cast<std::size_t>(j)];
    }
    std::int64_t correct = 0;
    for (int j = 0; j < 7; ++j)
        correct += res.confusion[static_cast<std::size_t>(j)]
                                [static_cast<std::size_t>(j)];
    res.accuracy = res.total == 0
                       ? 0.0
                       : static_cast<double>(correct) /
                             static_cast<double>(res.total);
    return res;
}

template <class T>
EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& sources,
                               EvalMode mode, int threads = 1) {
    Network<T> net = network_from_checkpoint<T>(ckpt);
    return evaluate(net, sources, mode, threads);
}

// ---------------------------------------------------------------------------
// training

struct TrainIO {
    std::string dir; // layout: dir/log.csv, dir/checkpoints/{last,best}.ckpt
};

struct TrainResult {
    Checkpoint best;
    std::vector<EpochRecord> history;
    int selected_epoch = -1;
    double best_val = -1.0;
};

namespace detail {

inline std::string log_line(const EpochRecord& r) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g", r.epoch, r.train_loss,
                  r.val_accuracy);
    return std::string(buf);
}

inline std::vector<EpochRecord> read_log(const std::string& path) {
    std::vector<EpochRecord> out;
    std::ifstream in(path);
    if (!in)
        return out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line.rfind("epoch", 0) == 0)
            continue;
        EpochRecord r;
        if (std::sscanf(line.c_str(), "%d,%lg,%lg", &r.epoch, &r.train_loss,
                        &r.val_accuracy) == 3)
            out.push_back(r);
    }
    return out;
}

inline void write_log(const std::string& path,
                      const std::vector<EpochRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw std::runtime_error("train: cannot write log " + path);
    out << "epoch,train_loss,val_acc\n";
    for (const EpochRecord& r : records)
        out << log_line(r) << "\n";
}

} // namespace detail

// One SGD epoch loop per the training protocol: a fresh 90/10 split each
// epoch, shuffled minibatches in train mode, eval-mode validation accuracy,
// and best-epoch selection (ties resolved to the earliest epoch).
template <class T>
TrainResult train(const Dataset& crops, const ArchitectureSpec& spec,
                  const TrainConfig& cfg, const TrainIO* io = nullptr,
                  const std::function<bool(const Network<T>&,
                                           const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    if (crops.samples.empty())
        throw std::invalid_argument("train: empty dataset");
    const int threads = cfg.deterministic ? 1 : cfg.threads;

    std::string ckpt_dir, last_path, vel_path, best_path, log_path;
    if (io) {
        ckpt_dir = io->dir + "/checkpoints";
        std::filesystem::create_directories(ckpt_dir);
        last_path = ckpt_dir + "/last.ckpt";
        vel_path = ckpt_dir + "/last.vel";
        best_path = ckpt_dir + "/best.ckpt";
        log_path = io->dir + "/log.csv";
    }

    Rng rng(cfg.seed);
    Network<T> net(spec, rng);
    std::vector<ParamBlock<T>> velocity = net.zero_grads();

    TrainResult result;
    int start_epoch = 1;
    if (io && std::filesystem::exists(last_path)) {
        Checkpoint last = load_checkpoint(last_path);
        apply_checkpoint(last, net);
        rng.set_state(last.rng_state);
        start_epoch = static_cast<int>(last.epoch) + 1;
        if (std::filesystem::exists(vel_path)) {
            Checkpoint vel = load_checkpoint(vel_path);
            std::vector<typename Network<T>::ParamRef> refs;
            for (std::size_t i = 0; i < net.layer_count(); ++i) {
                auto r = net.param_ref(i);
                refs.push_back(r.w ? typename Network<T>::ParamRef{
                                         &velocity[i].w, &velocity[i].b}
                                   : typename Network<T>::ParamRef{});
            }
            checkpoint_into_blocks<T>(vel, net.spec(), std::move(refs));
        }
        for (const EpochRecord& r : detail::read_log(log_path))
            if (r.epoch < start_epoch)
                result.history.push_back(r);
        for (const EpochRecord& r : result.history)
            if (r.val_accuracy > result.best_val) {
                result.best_val = r.val_accuracy;
                result.selected_epoch = r.epoch;
            }
        if (std::filesystem::exists(best_path))
            result.best = load_checkpoint(best_path);
        if (io)
            detail::write_log(log_path, result.history);
    } else if (io) {
        detail::write_log(log_path, {});
    }

    const int in_h = spec.in_h, in_w = spec.in_w;
    for (int epoch = start_epoch; epoch <= cfg.max_epochs; ++epoch) {
        auto [train_ds, val_ds] =
            epoch_split(crops, cfg.val_fraction, rng, cfg.split_by);

        const std::size_t n_train = train_ds.samples.size();
        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i)
            order[i] = i;
        for (std::size_t i = n_train; i > 1; --i)
            std::swap(order[i - 1], order[rng.next_below(i)]);

        double epoch_nll = 0.0;
        for (std::size_t b0 = 0; b0 < n_train;
             b0 += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t b1 = std::min(
                n_train, b0 + static_cast<std::size_t>(cfg.batch_size));
            const int bsz = static_cast<int>(b1 - b0);
            std::vector<const GrayImage*> imgs(static_cast<std::size_t>(bsz));
            std::vector<int> labels(static_cast<std::size_t>(bsz));
            for (int k = 0; k < bsz; ++k) {
                const Sample& s = train_ds.samples[order[b0 + k]];
                imgs[static_cast<std::size_t>(k)] = &s.image;
                labels[static_cast<std::size_t>(k)] = s.label;
            }
            const std::uint64_t batch_seed = rng.next_u64();

            auto chunks = detail::make_chunks(static_cast<std::size_t>(bsz),
                                              threads);
            std::vector<std::vector<ParamBlock<T>>> chunk_grads(chunks.size());
            std::vector<double> chunk_loss(chunks.size(), 0.0);
            detail::run_chunks(chunks, [&](std::size_t ci, std::size_t cb,
                                           std::size_t ce) {
                std::vector<const GrayImage*> sub(imgs.begin() + cb,
                                                  imgs.begin() + ce);
                Tensor<T> x = detail::batch_tensor<T>(sub, 1, in_h, in_w);
                typename Network<T>::Trace trace;
                Tensor<T> logits =
                    net.forward(x, Mode::train, batch_seed,
                                static_cast<std::int64_t>(cb), &trace);
                std::vector<int> sub_labels(labels.begin() + cb,
                                            labels.begin() + ce);
                SoftmaxXent<T> sx = softmax_xent(
                    logits, std::span<const int>(sub_labels), bsz);
                chunk_grads[ci] = net.zero_grads();
                net.backward(sx.grad, trace, chunk_grads[ci]);
                chunk_loss[ci] = sx.loss;
            });
            std::vector<ParamBlock<T>> grads = std::move(chunk_grads[0]);
            double batch_loss = chunk_loss[0];
            for (std::size_t ci = 1; ci < chunks.size(); ++ci) {
                detail::add_blocks(grads, chunk_grads[ci]);
                batch_loss += chunk_loss[ci];
            }
            sgd_step(net, grads, velocity, cfg);
            epoch_nll += batch_loss * bsz;
        }

        // eval-mode validation accuracy over the held-out crops
        const std::size_t n_val = val_ds.samples.size();
        auto vchunks = detail::make_chunks(n_val, threads);
        std::vector<std::int64_t> vcorrect(vchunks.size(), 0);
        detail::run_chunks(vchunks, [&](std::size_t ci, std::size_t vb,
                                        std::size_t ve) {
            for (std::size_t s0 = vb; s0 < ve;
                 s0 += static_cast<std::size_t>(cfg.batch_size)) {
                std::size_t s1 = std::min(
                    ve, s0 + static_cast<std::size_t>(cfg.batch_size));
                std::vector<const GrayImage*> sub;
                sub.reserve(s1 - s0);
                for (std::size_t k = s0; k < s1; ++k)
                    sub.push_back(&val_ds.samples[k].image);
                Tensor<T> x = detail::batch_tensor<T>(sub, 1, in_h, in_w);
                Tensor<T> logits = net.forward(x, Mode::eval);
                for (std::size_t k = s0; k < s1; ++k) {
                    const T* row =
                        logits.data() + (k - s0) * static_cast<std::size_t>(
                                                       spec.classes);
                    int pred = 0;
                    for (int j = 1; j < spec.classes; ++j)
                        if (row[j] > row[pred])
                            pred = j;
                    if (pred == val_ds.samples[k].label)
                        ++vcorrect[ci];
                }
            }
        });
        std::int64_t correct = 0;
        for (std::int64_t v : vcorrect)
            correct += v;

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_nll / static_cast<double>(n_train);
        rec.val_accuracy =
            static_cast<double>(correct) / static_cast<double>(n_val);
        result.history.push_back(rec);

        if (rec.val_accuracy > result.best_val) {
            result.best_val = rec.val_accuracy;
            result.selected_epoch = epoch;
            result.best = checkpoint_from_network(
                net, static_cast<std::uint32_t>(epoch), rng.state());
            // written before last.ckpt so an interrupted epoch re-runs and
            // rewrites it on resume
            if (io)
                save_checkpoint(result.best, best_path);
        }

        if (io) {
            Checkpoint last = checkpoint_from_network(
                net, static_cast<std::uint32_t>(epoch), rng.state());
            save_checkpoint(last, last_path);
            Checkpoint vel;
            vel.arch_name = net.spec().name;
            vel.arch_text = format_spec(net.spec());
            vel.epoch = static_cast<std::uint32_t>(epoch);
            vel.rng_state = rng.state();
            for (std::size_t i = 0; i < velocity.size(); ++i) {
                if (velocity[i].empty())
                    continue;
                ParamRecord pr;
                pr.shape = velocity[i].w.shape();
                pr.w.resize(velocity[i].w.size());
                for (std::size_t k = 0; k < pr.w.size(); ++k)
                    pr.w[k] = static_cast<float>(velocity[i].w[k]);
                pr.b.resize(velocity[i].b.size());
                for (std::size_t k = 0; k < pr.b.size(); ++k)
                    pr.b[k] = static_cast<float>(velocity[i].b[k]);
                vel.records.push_back(std::move(pr));
            }
            save_checkpoint(vel, vel_path);
            std::ofstream log(log_path, std::ios::app);
            log << detail::log_line(rec) << "\n";
        }

        if (on_epoch && !on_epoch(net, rec))
            break;
    }
    return result;
}

} // namespace exprbench
