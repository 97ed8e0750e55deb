#pragma once
/**
 * @file arch.hpp
 * @brief Architecture search spaces and the networks decoded from them.
 *
 * A space is a list of slots, each a named decision over candidate ops. A
 * Network instantiates parameters for some candidates of every slot: a child
 * network holds only the chosen op, a supernet holds all of them and can run
 * any genome (weight sharing) or a softmax mixture of all ops.
 */

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "picnn/ops.hpp"
#include "picnn/tensor.hpp"

namespace picnn {

enum class SpaceKind { cnn_stack, unet_entire, unet_cell, chain };

std::string_view to_string(SpaceKind k);
SpaceKind space_kind_from_string(std::string_view name);

enum class OpKind {
  conv3, conv5, conv7,        // standard convolution
  dsconv3, dsconv5, dsconv7,  // depthwise separable convolution
  identity, maxpool3, avgpool3,  // shape-preserving pooling, stride 1
  maxpool2, avgpool2,            // downsampling by 2
  bilinear, nearest              // upsampling to the skip resolution
};

std::string_view to_string(OpKind k);
OpKind op_kind_from_string(std::string_view name);

struct Slot {
  std::string name;
  std::vector<OpKind> candidates;
};

struct SearchSpace {
  SpaceKind kind = SpaceKind::cnn_stack;
  std::vector<Slot> slots;
  std::vector<std::size_t> channels{16, 32, 32, 16};  // cnn_stack conv widths
  std::size_t width = 32;                              // UNet channels at every stage
  std::size_t depth = 3;                               // UNet down/up stages

  /// Standard spaces. `one_shot` drops the 7x7 candidates used only by multi-trial search.
  static SearchSpace make(SpaceKind kind, bool one_shot = false);
  /// Sequence of shape-preserving slots on `channels` channels, no fixed layers.
  static SearchSpace chain(std::vector<Slot> slots, std::size_t channels);

  std::vector<std::size_t> slot_sizes() const;
  /// log10 of the number of genomes.
  double log10_size() const;
};

void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);

/// One candidate index per slot.
using ArchGenome = std::vector<std::size_t>;

/// Throws ConfigError unless the genome has one in-range index per slot.
void validate_genome(const SearchSpace& space, const ArchGenome& genome);
/// {"space": kind, "choices": [...], "ops": [names]}
nlohmann::json genome_to_json(const SearchSpace& space, const ArchGenome& genome);
ArchGenome genome_from_json(const SearchSpace& space, const nlohmann::json& j);
std::string genome_string(const SearchSpace& space, const ArchGenome& genome);

struct NetworkOptions {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  PadMode cols = PadMode::zeros;  // circular for periodic columns
  std::uint64_t seed = 0;
  std::size_t norm_groups = 8;
};

/// Where a slot's op is applied; cell spaces reuse one slot at several sites.
struct SiteInfo {
  std::size_t slot = 0;
  std::size_t stage = 0;
  std::size_t in_channels = 0, out_channels = 0;
};

class Network {
 public:
  /// Child network holding only the genome's ops.
  static Network build(const SearchSpace& space, const ArchGenome& genome, const NetworkOptions& options);
  /// Every candidate of every slot.
  static Network supernet(const SearchSpace& space, const NetworkOptions& options);

  /// Runs the built genome (child networks only).
  Tensor forward(const Tensor& x) const;
  /// Runs one genome; every chosen op must be instantiated.
  Tensor forward(const Tensor& x, const ArchGenome& genome) const;
  /// Per slot, the sum of all candidate outputs weighted by probs[slot] ([K] tensors).
  Tensor forward_mixed(const Tensor& x, const std::vector<Tensor>& probs) const;

  /// All trainable tensors, in a fixed order.
  std::vector<Tensor> parameters() const;
  /// Tensors a genome activates (fixed layers plus the chosen ops).
  std::vector<Tensor> parameters(const ArchGenome& genome) const;
  std::size_t parameter_count() const;

  const SearchSpace& space() const { return space_; }
  const std::optional<ArchGenome>& genome() const { return genome_; }
  const std::vector<SiteInfo>& sites() const { return site_info_; }

 private:
  struct OpParams {
    std::vector<Tensor> tensors;
  };
  struct Site {
    SiteInfo info;
    std::vector<std::optional<OpParams>> ops;  // per candidate
  };
  using Choice = std::function<Tensor(std::size_t site, const Tensor& x, const Tensor* skip)>;

  Network(const SearchSpace& space, const NetworkOptions& options, const std::vector<std::vector<bool>>& active);

  void add_site(std::size_t slot, std::size_t stage, std::size_t in, std::size_t out,
                const std::vector<std::vector<bool>>& active);
  OpParams make_fixed_conv(std::size_t in, std::size_t out, std::size_t k, bool norm, std::uint64_t tag);
  Tensor apply_op(OpKind op, const OpParams* params, const Tensor& x, const Tensor* skip) const;
  Tensor run(const Tensor& x, const Choice& choice) const;
  Tensor fixed_conv(const OpParams& p, const Tensor& x, bool norm, bool act) const;

  SearchSpace space_;
  NetworkOptions options_;
  std::optional<ArchGenome> genome_;
  std::vector<Site> sites_;
  std::vector<SiteInfo> site_info_;
  std::vector<OpParams> fixed_;  // stem (cell space) and output layer
};

}  // namespace picnn
