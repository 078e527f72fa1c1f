#include "slamformer/attention.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "slamformer/tensor_ops.hpp"

namespace slamformer {

AttentionMask AttentionMask::build(MaskKind kind, FrameLayout layout,
                                   std::optional<int> prefix_frames) {
    if (layout.num_frames <= 0 || layout.tokens_per_frame <= 0)
        throw Error::config("build_mask: layout must have positive frame and token counts");
    if (kind == MaskKind::mixed && !prefix_frames.has_value())
        throw Error::config("build_mask: mixed mask requires prefix_frames");
    const int n = layout.num_frames;
    const int p = kind == MaskKind::mixed ? *prefix_frames : 0;
    if (kind == MaskKind::mixed && (p < 0 || p > n))
        throw Error::config("build_mask: prefix_frames outside [0, num_frames]");

    AttentionMask m;
    m.kind_ = kind;
    m.layout_ = layout;
    m.prefix_frames_ = p;
    m.allow_.assign(static_cast<size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            bool ok = false;
            switch (kind) {
                case MaskKind::full:
                    ok = true;
                    break;
                case MaskKind::causal_full2:
                    ok = (j <= i) || (i < 2 && j < 2);
                    break;
                case MaskKind::mixed:
                    ok = i < p ? (j < p) : (j <= i);
                    break;
            }
            m.allow_[static_cast<size_t>(i) * n + j] = ok ? 1 : 0;
        }
    }
    return m;
}

bool AttentionMask::allows(int query_frame, int key_frame) const {
    const int n = layout_.num_frames;
    if (query_frame < 0 || query_frame >= n || key_frame < 0 || key_frame >= n)
        throw Error::bounds("AttentionMask::allows: frame index out of range");
    return allow_[static_cast<size_t>(query_frame) * n + key_frame] != 0;
}

BoolMask AttentionMask::expand_tokens() const {
    const int t = layout_.tokens_per_frame;
    const int total = layout_.total_tokens();
    BoolMask m = BoolMask::all(total, total, false);
    for (int fi = 0; fi < layout_.num_frames; ++fi)
        for (int fj = 0; fj < layout_.num_frames; ++fj) {
            if (!allows(fi, fj)) continue;
            for (int a = 0; a < t; ++a)
                for (int b = 0; b < t; ++b) m.set(fi * t + a, fj * t + b, true);
        }
    return m;
}

namespace {

// Column selection / scatter matrices route per-head slices through matmul so
// gradients flow without a dedicated gather op.
Tensor select_matrix(int d_model, int head, int d_head) {
    std::vector<scalar> sel(static_cast<size_t>(d_model) * d_head, scalar(0));
    for (int j = 0; j < d_head; ++j)
        sel[static_cast<size_t>(head * d_head + j) * d_head + j] = scalar(1);
    return Tensor::from_data({d_model, d_head}, std::move(sel));
}

Tensor scatter_matrix(int d_model, int head, int d_head) {
    std::vector<scalar> sc(static_cast<size_t>(d_head) * d_model, scalar(0));
    for (int j = 0; j < d_head; ++j)
        sc[static_cast<size_t>(j) * d_model + head * d_head + j] = scalar(1);
    return Tensor::from_data({d_head, d_model}, std::move(sc));
}

// Core masked multi-head scaled dot-product over pre-projected q/k/v.
Tensor masked_mha(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                  const BoolMask& token_mask) {
    const int d_model = q.cols();
    if (heads <= 0 || d_model % heads != 0)
        throw Error::config("attention: d_model must be divisible by heads");
    if (k.cols() != d_model || v.cols() != d_model)
        throw Error::dimension("attention: q/k/v feature dims differ");
    if (k.rows() != v.rows()) throw Error::dimension("attention: k/v token counts differ");
    if (token_mask.rows != q.rows() || token_mask.cols != k.rows())
        throw Error::contract("attention: mask does not match token counts");

    const int d_head = d_model / heads;
    const auto inv_sqrt = static_cast<scalar>(1.0 / std::sqrt(static_cast<double>(d_head)));

    Tensor out;
    for (int h = 0; h < heads; ++h) {
        const Tensor S = select_matrix(d_model, h, d_head);
        const Tensor qh = matmul(q, S);
        const Tensor kh = matmul(k, S);
        const Tensor vh = matmul(v, S);
        const Tensor scores = mul(matmul(qh, transpose(kh)), inv_sqrt);
        const Tensor weights = softmax_rows(scores, &token_mask);
        Tensor oh = matmul(weights, vh);
        if (heads == 1) return oh;
        oh = matmul(oh, scatter_matrix(d_model, h, d_head));
        out = h == 0 ? oh : add(out, oh);
    }
    return out;
}

}  // namespace

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                           const AttentionMask& mask) {
    return masked_mha(q, k, v, heads, mask.expand_tokens());
}

Tensor multihead_attention_tokens(const Tensor& q, const Tensor& k, const Tensor& v,
                                  int heads, const BoolMask& token_mask) {
    return masked_mha(q, k, v, heads, token_mask);
}

const KVBlock& KVCache::block(int layer, int frame_idx) const {
    if (layer < 0 || layer >= layer_count())
        throw Error::bounds("KVCache::block: layer out of range");
    const auto& frames = per_layer_[static_cast<size_t>(layer)];
    if (frame_idx < 0 || frame_idx >= static_cast<int>(frames.size()))
        throw Error::bounds("KVCache::block: frame index out of range");
    return frames[static_cast<size_t>(frame_idx)];
}

void KVCache::append(int frame_id, std::vector<KVBlock> blocks) {
    if (layer_count() == 0) throw Error::contract("KVCache::append: cache has no layers");
    if (static_cast<int>(blocks.size()) != layer_count())
        throw Error::dimension("KVCache::append: expected one block per layer");
    if (!frame_ids_.empty() && frame_id <= frame_ids_.back())
        throw Error::ordering("KVCache::append: frame id " + std::to_string(frame_id) +
                              " not greater than last id " + std::to_string(frame_ids_.back()));
    for (int l = 0; l < layer_count(); ++l) {
        const auto& b = blocks[static_cast<size_t>(l)];
        if (!b.k.defined() || !b.v.defined() || !b.k.same_shape(b.v))
            throw Error::dimension("KVCache::append: malformed block at layer " + std::to_string(l));
        if (!per_layer_[static_cast<size_t>(l)].empty() &&
            !per_layer_[static_cast<size_t>(l)].front().k.same_shape(b.k))
            throw Error::dimension("KVCache::append: block shape differs from existing frames");
    }
    for (int l = 0; l < layer_count(); ++l)
        per_layer_[static_cast<size_t>(l)].push_back(std::move(blocks[static_cast<size_t>(l)]));
    frame_ids_.push_back(frame_id);
}

void KVCache::replace_prefix(const KVCache& refined) {
    const int n = refined.frame_count();
    if (n == 0) return;
    if (refined.layer_count() != layer_count())
        throw Error::dimension("KVCache::replace_prefix: layer count mismatch");
    if (n > frame_count())
        throw Error::bounds("KVCache::replace_prefix: " + std::to_string(n) +
                            " frames exceed cache length " + std::to_string(frame_count()));
    for (int l = 0; l < layer_count(); ++l)
        for (int f = 0; f < n; ++f) {
            const auto& nb = refined.block(l, f);
            if (!nb.k.same_shape(per_layer_[static_cast<size_t>(l)][static_cast<size_t>(f)].k))
                throw Error::dimension("KVCache::replace_prefix: block shape mismatch");
        }
    for (int l = 0; l < layer_count(); ++l)
        for (int f = 0; f < n; ++f)
            per_layer_[static_cast<size_t>(l)][static_cast<size_t>(f)] = refined.block(l, f);
}

namespace {

constexpr char kMagic[4] = {'S', 'F', 'K', 'V'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error::io("KV snapshot: truncated file");
    return v;
}

}  // namespace

void KVCache::save(const std::filesystem::path& path, int heads) const {
    if (empty()) throw Error::contract("KVCache::save: empty cache");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error::io("KV snapshot: cannot open " + path.string());
    const Tensor& k0 = block(0, 0).k;
    const uint32_t tokens = static_cast<uint32_t>(k0.rows());
    const uint32_t d_model = static_cast<uint32_t>(k0.cols());
    if (heads <= 0 || d_model % static_cast<uint32_t>(heads) != 0)
        throw Error::config("KV snapshot: d_model not divisible by heads");
    os.write(kMagic, 4);
    put<uint32_t>(os, kVersion);
    put<uint32_t>(os, static_cast<uint32_t>(layer_count()));
    put<uint32_t>(os, static_cast<uint32_t>(frame_count()));
    put<uint32_t>(os, tokens);
    put<uint32_t>(os, static_cast<uint32_t>(heads));
    put<uint32_t>(os, d_model / static_cast<uint32_t>(heads));
    for (int f = 0; f < frame_count(); ++f) put<int32_t>(os, frame_ids_[static_cast<size_t>(f)]);
    for (int l = 0; l < layer_count(); ++l)
        for (int f = 0; f < frame_count(); ++f)
            for (const Tensor* t : {&block(l, f).k, &block(l, f).v})
                for (scalar v : t->data()) put<float>(os, static_cast<float>(v));
    if (!os) throw Error::io("KV snapshot: write failed for " + path.string());
}

KVCache KVCache::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error::io("KV snapshot: cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw Error::io("KV snapshot: bad magic in " + path.string());
    const auto version = get<uint32_t>(is);
    if (version != kVersion) throw Error::io("KV snapshot: unsupported version");
    const auto layers = get<uint32_t>(is);
    const auto frames = get<uint32_t>(is);
    const auto tokens = get<uint32_t>(is);
    const auto heads = get<uint32_t>(is);
    const auto d_head = get<uint32_t>(is);
    const int d_model = static_cast<int>(heads * d_head);

    std::vector<int> ids(frames);
    for (auto& id : ids) id = get<int32_t>(is);

    KVCache cache(static_cast<int>(layers));
    std::vector<std::vector<KVBlock>> staged(frames);
    for (uint32_t l = 0; l < layers; ++l)
        for (uint32_t f = 0; f < frames; ++f) {
            KVBlock b;
            for (Tensor* t : {&b.k, &b.v}) {
                std::vector<scalar> data(static_cast<size_t>(tokens) * d_model);
                for (auto& v : data) v = static_cast<scalar>(get<float>(is));
                *t = Tensor::from_data({static_cast<int>(tokens), d_model}, std::move(data));
            }
            staged[f].push_back(std::move(b));
        }
    for (uint32_t f = 0; f < frames; ++f) cache.append(ids[f], std::move(staged[f]));
    return cache;
}

Tensor incremental_attention(const Tensor& q_new, const KVCache& cache, int layer,
                             const KVBlock& self_kv, int heads) {
    const bool have_cache = !cache.empty();
    if (!have_cache && !self_kv.k.defined())
        throw Error::contract("incremental_attention: empty cache and no self block");
    if (have_cache && (layer < 0 || layer >= cache.layer_count()))
        throw Error::bounds("incremental_attention: layer out of range");

    std::vector<Tensor> ks, vs;
    if (have_cache)
        for (int f = 0; f < cache.frame_count(); ++f) {
            ks.push_back(cache.block(layer, f).k);
            vs.push_back(cache.block(layer, f).v);
        }
    if (self_kv.k.defined()) {
        ks.push_back(self_kv.k);
        vs.push_back(self_kv.v);
    }
    const Tensor k = ks.size() == 1 ? ks.front() : concat_rows(ks);
    const Tensor v = vs.size() == 1 ? vs.front() : concat_rows(vs);

    // The new frame is the last block of a causal sequence, so its queries
    // see every provided key.
    const BoolMask token_mask = BoolMask::all(q_new.rows(), k.rows(), true);
    return masked_mha(q_new, k, v, heads, token_mask);
}

}  // namespace slamformer
