#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msinet/layers.hpp"

namespace msinet {

// Interaction operators in tie-break order: argmax ties resolve to the lowest.
enum class InteractionOp { None = 0, Exchange = 1, ChannelGate = 2, CrossAttention = 3 };

inline constexpr std::size_t kNumOps = 4;
inline constexpr std::size_t kNumCells = 6;
inline constexpr std::size_t kSlotsPerCell = 2;
inline constexpr std::size_t kNumSlots = kNumCells * kSlotsPerCell;

// Single-letter codes N, E, G, A.
char op_code(InteractionOp op);
InteractionOp op_from_code(char code);

enum class Fusion { Sum, Minus, Mul };
std::string fusion_name(Fusion f);
Fusion parse_fusion(const std::string& name);

struct SupernetConfig {
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t stem_width = 16;
  // Depthwise stack depth of the first branch; the second branch has depth 1.
  std::size_t rho = 3;
  Fusion fusion = Fusion::Sum;
  std::size_t embedding_dim = 64;
  std::size_t image_h = 64;
  std::size_t image_w = 32;
  // Branch channels = max(1, width / bottleneck).
  std::size_t bottleneck = 4;

  // Throws ArgumentError on any invalid field.
  void validate() const;
  std::size_t branch_channels(std::size_t width) const;
  std::size_t cell_width(std::size_t cell) const { return widths[cell / 2]; }
  bool operator==(const SupernetConfig&) const = default;

  // Widths and input size of the full-scale reference model.
  static SupernetConfig full_scale();
};

inline constexpr std::size_t kTotalStride = 16;

struct ArchDescriptor {
  std::array<InteractionOp, kNumSlots> ops{};
  SupernetConfig config;

  std::string ops_string() const;  // e.g. "G G E G A G G N G A E A"
  bool operator==(const ArchDescriptor&) const = default;
};

// The searched reference architecture.
ArchDescriptor msinet_descriptor(const SupernetConfig& config = {});
// Every slot uses the same operator.
ArchDescriptor uniform_descriptor(InteractionOp op, const SupernetConfig& config = {});
// Each slot drawn uniformly from the four operators.
ArchDescriptor random_descriptor(unsigned long long seed, const SupernetConfig& config = {});

std::string descriptor_to_text(const ArchDescriptor& d);
// `where` names the source in error messages.
ArchDescriptor descriptor_from_text(const std::string& text, const std::string& where = "descriptor");
void save_descriptor(const ArchDescriptor& d, const std::string& path);
ArchDescriptor load_descriptor(const std::string& path);

// Per-slot argmax of alpha [12,4]; ties go to the lowest operator.
template <typename T>
ArchDescriptor discretize(const Tensor<T>& alpha, const SupernetConfig& config = {});

// Parameters of one interaction slot; absent members belong to operators that
// are not materialized.
template <typename T>
struct InteractionParams {
  // Channel gate MLP, shared by both branches.
  std::optional<LinearParams<T>> gate_fc1, gate_fc2;
  // Cross-attention residual scales, one per branch, initialized to 0.
  std::optional<Tensor<T>> gamma;

  static InteractionParams create(std::size_t channels, bool with_gate, bool with_attention, Rng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
using VarPair = std::pair<Var<T>, Var<T>>;

template <typename T>
VarPair<T> interaction_apply(InteractionOp op, Var<T> x1, Var<T> x2, InteractionParams<T>& p);

// Sum over operators of softmax(alpha_row)[o] * op_o(x1, x2); alpha_row has 4 elements.
template <typename T>
VarPair<T> mixed_interaction(Var<T> x1, Var<T> x2, Var<T> alpha_row, InteractionParams<T>& p);

// 1x1 block followed by `depthwise.size()` depthwise 3x3 blocks.
template <typename T>
struct BranchParams {
  ConvBlock<T> pointwise;
  std::vector<ConvBlock<T>> depthwise;

  static BranchParams create(std::size_t channels, std::size_t depth, Rng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

template <typename T>
Var<T> branch_forward(Var<T> x, BranchParams<T>& p);

template <typename T>
struct CellParams {
  ConvBlock<T> reduce;
  // [stage][branch]; branch 0 is the deep one.
  std::array<std::array<BranchParams<T>, 2>, 2> branches;
  std::array<InteractionParams<T>, kSlotsPerCell> slots;
  ConvBlock<T> expand;  // no activation; applied before the residual

  // `slot_ops` restricts materialized interaction parameters; nullopt keeps all.
  static CellParams create(std::size_t in, std::size_t out, std::size_t mid, std::size_t rho,
                           const std::optional<std::array<InteractionOp, kSlotsPerCell>>& slot_ops, Rng& rng);
  void collect(const std::string& prefix, NamedTensors<T>& out);
};

// Either a mixture (alpha rows) or a fixed operator per slot.
template <typename T>
struct SlotChoice {
  std::optional<Var<T>> alpha_row;
  InteractionOp op = InteractionOp::None;
};

template <typename T>
Var<T> fuse(Var<T> a, Var<T> b, Fusion f);

template <typename T>
Var<T> cell_forward(Var<T> x, CellParams<T>& p, const std::array<SlotChoice<T>, kSlotsPerCell>& slots,
                    Fusion fusion);

// 1x1 conv block then 2x2 average pooling; requires even spatial size.
template <typename T>
Var<T> downsample(Var<T> x, ConvBlock<T>& p);

template <typename T>
struct NetworkOutput {
  Var<T> feature_map;  // output of the last cell, [B, widths[2], H/16, W/16]
  Var<T> embedding;    // [B, embedding_dim]
};

template <typename T>
struct MsiNetwork {
  SupernetConfig config;
  // Set for fixed networks: only these operators carry parameters.
  std::optional<ArchDescriptor> fixed;
  ConvBlock<T> stem;
  std::array<CellParams<T>, kNumCells> cells;
  std::array<ConvBlock<T>, 2> downs;
  // Present when embedding_dim differs from the last width.
  std::optional<ConvBlock<T>> head;

  static MsiNetwork supernet(const SupernetConfig& config, Rng& rng);
  static MsiNetwork fixed_network(const ArchDescriptor& desc, Rng& rng);

  // Stable traversal of every parameter and buffer.
  NamedTensors<T> named_tensors();
  std::vector<Tensor<T>*> trainable();
  std::size_t parameter_count();
  void set_mode(NormMode mode);
  void set_update_running(bool on);
};

// Every slot mixes all four operators with softmax(alpha[slot]); alpha is [12,4].
template <typename T>
NetworkOutput<T> supernet_forward(Var<T> images, Var<T> alpha, MsiNetwork<T>& net);

// One operator per slot; works on fixed networks and on supernet weights.
template <typename T>
NetworkOutput<T> fixed_forward(Var<T> images, const ArchDescriptor& desc, MsiNetwork<T>& net);

}  // namespace msinet
