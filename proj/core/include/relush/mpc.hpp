#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "relush/cost.hpp"
#include "relush/fixedpoint.hpp"
#include "relush/model.hpp"

namespace relush::mpc {

/// P0 and P1 hold additive data shares; P2 deals correlated randomness and
/// assists with truncation and sign extraction.
enum Party : int { P0 = 0, P1 = 1, P2 = 2 };

struct MessageRecord {
  int round = 0;
  std::uint8_t sender = 0;
  std::uint8_t receiver = 0;
  std::uint64_t bits = 0;
  std::string tag;
};

/// Per-message byte ledger. Tags: conv, linear, drelu, mul, trunc. Byte
/// accounting for drelu is synthesized to the analytical formula; trunc is
/// dealer-assisted and carried at zero modeled cost.
class MessageLog {
 public:
  void add(int round, int sender, int receiver, std::uint64_t bits,
           const std::string& tag);

  const std::vector<MessageRecord>& records() const { return records_; }
  const std::map<std::string, std::uint64_t>& bits_by_tag() const {
    return bits_by_tag_;
  }
  std::uint64_t total_bits() const { return total_bits_; }
  int max_round() const { return max_round_; }

  /// CSV with header round,sender,receiver,bytes,tag.
  std::string to_csv() const;
  std::string summary_json() const;

 private:
  std::vector<MessageRecord> records_;
  std::map<std::string, std::uint64_t> bits_by_tag_;
  std::uint64_t total_bits_ = 0;
  int max_round_ = 0;
};

/// Additive shares of a vector of ring elements.
struct ShareVec {
  std::vector<std::uint64_t> s0, s1;

  std::size_t size() const { return s0.size(); }
  static ShareVec zeros(std::size_t n) {
    return ShareVec{std::vector<std::uint64_t>(n, 0),
                    std::vector<std::uint64_t>(n, 0)};
  }
};

struct SimParams {
  int ring_bits = 64;
  int logp = 8;
  int scale_bits = 13;

  void validate() const;
  ProtocolParams protocol() const { return ProtocolParams{ring_bits, logp}; }
  FixedPointFormat format() const {
    return FixedPointFormat{ring_bits, scale_bits};
  }
};

/// Three logical parties in one process, exchanging messages through
/// round-stamped mailboxes in lockstep. Pairwise PRF streams supply the
/// correlated randomness, so Beaver products and dealer re-sharings move
/// exactly the modeled number of ring elements.
class SimContext {
 public:
  SimContext(SimParams params, std::uint64_t master_seed);

  const SimParams& params() const { return params_; }
  const RingParams& ring() const { return ring_; }
  MessageLog& log() { return log_; }
  const MessageLog& log() const { return log_; }
  int current_round() const { return round_; }

  // -- sharing ---------------------------------------------------------------
  ShareVec share(std::span<const std::uint64_t> secrets);
  std::vector<std::uint64_t> reconstruct(const ShareVec& t) const;

  // -- local (communication-free) share algebra -------------------------------
  void add_inplace(ShareVec& a, const ShareVec& b) const;
  void add_public_inplace(ShareVec& a, std::span<const std::uint64_t> c) const;
  ShareVec scale_by_public(const ShareVec& a, std::uint64_t c) const;

  // -- protocol operations -----------------------------------------------------
  /// Elementwise Beaver product; 2 rounds, 5l bits per element, tag "mul".
  ShareVec mul(const ShareVec& a, const ShareVec& b);

  /// (m x n) * (n x v) Beaver matrix product; 2 rounds,
  /// (2mn + 2nv + mv) l bits under the given tag ("linear" or "conv").
  ShareVec matmul(const ShareVec& X, std::int64_t m, std::int64_t n,
                  const ShareVec& W, std::int64_t v, const char* tag);

  /// Block-diagonal sparse product: per-channel gate dot products of shared
  /// weights, sum_groups cost_linear(1, |group|, 1); 2 rounds, tag "linear".
  ShareVec gate_dot_shared(const ShareVec& s, const GateLayerPlan& plan,
                           const std::vector<ShareVec>& gate_weights);

  /// Dealer-assisted exact arithmetic right shift; logged under "trunc" at
  /// zero cost and consuming no protocol round.
  ShareVec truncate(const ShareVec& t, int shift_bits);

  /// Batched sign test: shares of [x >= 0] as ring elements; 8 rounds,
  /// (8 logp + 19) l bits per element, tag "drelu" (accounting synthesized
  /// to the formula; the functionality is dealer-assisted).
  ShareVec drelu(const ShareVec& t);

  /// First word of every payload P0 sends or receives, in order. Exposes
  /// P0's view for the transcript-uniformity smoke checks.
  const std::vector<std::uint64_t>& p0_transcript() const {
    return p0_transcript_;
  }

 private:
  SimParams params_;
  RingParams ring_;
  Rng prf02_;   // common randomness P0 <-> P2
  Rng prf12_;   // common randomness P1 <-> P2
  Rng share_rng_;
  MessageLog log_;
  int round_ = 0;
  std::array<std::array<std::deque<std::vector<std::uint64_t>>, 3>, 3> mail_;
  std::vector<std::uint64_t> p0_transcript_;

  void begin_round() { ++round_; }
  /// Real payload whose size is also its ledger entry.
  void send_logged(Party from, Party to, std::vector<std::uint64_t> payload,
                   const char* tag);
  /// Real payload rider without a ledger entry (covered by synthesized
  /// accounting rows).
  void send_raw(Party from, Party to, std::vector<std::uint64_t> payload);
  /// Ledger-only entry, in ring elements.
  void account(Party from, Party to, std::uint64_t elements, const char* tag);
  std::vector<std::uint64_t> recv(Party from, Party to);
  std::vector<std::uint64_t> prf_vec(Rng& prf, std::size_t n);
};

/// Result of simulating one inference. Logits reconstruct bit-exactly to the
/// plaintext fixed-point engine's output on the same parameters and input.
struct SimResult {
  std::vector<std::uint64_t> logits_ring;
  std::vector<double> logits;
  int rounds = 0;
  MessageLog log;
};

SimResult sim_network(const Model& model, std::span<const double> input,
                      const SimParams& params, std::uint64_t seed,
                      std::optional<std::uint64_t> noise_seed = std::nullopt);

/// Compares per-tag ledger totals and round counts against the analytical
/// model. Exact equality is required.
struct ReconcileResult {
  bool ok = true;
  std::vector<std::string> mismatches;
};
ReconcileResult reconcile(const MessageLog& log, const CostReport& report);

}  // namespace relush::mpc
