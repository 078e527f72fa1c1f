#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "slamformer/tensor.hpp"

namespace slamformer {

// Token sequences are blocked by frame: every frame contributes the same
// number of tokens (patch tokens + register tokens).
struct FrameLayout {
    int tokens_per_frame = 0;
    int num_frames = 0;

    int total_tokens() const { return tokens_per_frame * num_frames; }
};

enum class MaskKind { causal_full2, full, mixed };

// Frame-granularity attention mask, expanded to token granularity on demand.
// Intra-frame attention is always all-to-all and handled separately.
class AttentionMask {
public:
    static AttentionMask build(MaskKind kind, FrameLayout layout,
                               std::optional<int> prefix_frames = std::nullopt);

    MaskKind kind() const { return kind_; }
    const FrameLayout& layout() const { return layout_; }
    int prefix_frames() const { return prefix_frames_; }

    bool allows(int query_frame, int key_frame) const;
    // Token-level expansion for masked softmax over the full sequence.
    BoolMask expand_tokens() const;

private:
    MaskKind kind_ = MaskKind::full;
    FrameLayout layout_;
    int prefix_frames_ = 0;
    std::vector<uint8_t> allow_;  // num_frames^2 row-major
};

inline AttentionMask build_mask(MaskKind kind, FrameLayout layout,
                                std::optional<int> prefix_frames = std::nullopt) {
    return AttentionMask::build(kind, layout, prefix_frames);
}

// Multi-head scaled dot-product attention over pre-projected q/k/v
// [tokens x d_model]; the mask is expanded from frame to token granularity.
// Surrounding linear projections belong to the caller.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                           const AttentionMask& mask);

// Same attention with an explicit token-level mask (block-diagonal intra-frame
// attention and the like).
Tensor multihead_attention_tokens(const Tensor& q, const Tensor& k, const Tensor& v,
                                  int heads, const BoolMask& token_mask);

struct KVBlock {
    Tensor k;  // [tokens_per_frame x d_model]
    Tensor v;
};

// Per-layer, per-frame key/value blocks captured at the input of each
// inter-frame attention. Single writer; readers may share snapshots.
class KVCache {
public:
    KVCache() = default;
    explicit KVCache(int layers) : per_layer_(static_cast<size_t>(layers)) {}

    int layer_count() const { return static_cast<int>(per_layer_.size()); }
    int frame_count() const { return static_cast<int>(frame_ids_.size()); }
    bool empty() const { return frame_ids_.empty(); }
    const std::vector<int>& frame_ids() const { return frame_ids_; }

    const KVBlock& block(int layer, int frame_idx) const;

    // frame_id must exceed the last stored id; blocks has one entry per layer.
    void append(int frame_id, std::vector<KVBlock> blocks);

    // Replaces the first refined.frame_count() frames in every layer; the
    // suffix keeps its storage untouched. Frame ids are preserved.
    void replace_prefix(const KVCache& refined);

    // Versioned binary snapshot ("SFKV" magic), little-endian, float32
    // blocks layer-major / frame-minor, K before V.
    void save(const std::filesystem::path& path, int heads) const;
    static KVCache load(const std::filesystem::path& path);

private:
    std::vector<std::vector<KVBlock>> per_layer_;
    std::vector<int> frame_ids_;
};

// Attention of one new frame's queries over [cached frames || self frame].
// Numerically equal to the matching row block of a batch causal forward.
Tensor incremental_attention(const Tensor& q_new, const KVCache& cache, int layer,
                             const KVBlock& self_kv, int heads);

}  // namespace slamformer
