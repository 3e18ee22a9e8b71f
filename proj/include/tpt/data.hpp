#pragma once

#include "tpt/model.hpp"
#include "tpt/random.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tpt {

struct Sample {
  std::string question;
  std::string answer;
  std::string module;

  friend bool operator==(const Sample&, const Sample&) = default;
};

inline constexpr std::string_view kModules[] = {"add_sub", "multiply", "compare", "nested_fraction"};

/// Deterministic in (module, n, seed). Every answer is re-derived from the
/// question text by `evaluate_question` before it is accepted.
std::vector<Sample> generate_dataset(std::string_view module, std::size_t n, std::uint64_t seed);

/// Train and held-out sets whose questions are disjoint. Held-out questions
/// are distinct; training questions may repeat.
struct DatasetSplit {
  std::vector<Sample> train;
  std::vector<Sample> held_out;
};
DatasetSplit generate_split(std::string_view module, std::size_t n_train, std::size_t n_held_out, std::uint64_t seed);

/// Independent exact evaluator for the generated question forms. Parses the
/// arithmetic with rationals and returns the canonical answer string, or
/// nothing if the text is not a recognized question.
std::optional<std::string> evaluate_question(std::string_view question);

using TokenId = int;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kSos = 1;
  static constexpr TokenId kEos = 2;

  /// Specials plus the sorted unique characters of all questions and answers.
  static Vocabulary build(std::span<const Sample> samples);
  /// Inverse of `symbols()`. The first three entries must be the specials.
  static Vocabulary from_symbols(std::vector<std::string> symbols);

  Index size() const { return static_cast<Index>(symbols_.size()); }
  /// "<pad>", "<sos>", "<eos>", then one-character strings.
  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(TokenId id) const;
  bool contains(char c) const { return ids_[static_cast<unsigned char>(c)] >= 0; }

  /// Characters of `text` followed by EOS. Throws VocabularyError listing
  /// every unknown character.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Stops at the first EOS; PAD and SOS are skipped.
  std::string decode(std::span<const TokenId> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::array<TokenId, 256> ids_{};
};

struct SequenceLimits {
  Index max_src_len = 64;
  Index max_tgt_len = 32;
};

/// Right-padded teacher-forcing batch. src row: SOS question EOS.
/// tgt_in row: SOS answer, tgt_out row: answer EOS.
struct Batch {
  TokenMatrix src;
  TokenMatrix tgt_in;
  TokenMatrix tgt_out;
  Mask src_mask;       // true on real tokens
  Mask tgt_loss_mask;  // false exactly on PAD positions of tgt_out
  std::vector<Index> src_lengths;
  std::vector<Index> tgt_lengths;

  Index size() const { return src.rows(); }
};

/// Samples encoded once and validated against the length limits. Every batch
/// drawn from it is padded to the corpus-wide widths, so all batches share
/// their column counts.
class EncodedCorpus {
 public:
  /// Throws LengthError naming the first sample that does not fit.
  EncodedCorpus(std::span<const Sample> samples, const Vocabulary& vocab, const SequenceLimits& limits);

  std::size_t size() const { return src_.size(); }
  Index src_width() const { return src_width_; }
  Index tgt_width() const { return tgt_width_; }

  Batch batch(std::span<const std::size_t> indices) const;

 private:
  std::vector<std::vector<TokenId>> src_;
  std::vector<std::vector<TokenId>> tgt_out_;
  Index src_width_ = 0;
  Index tgt_width_ = 0;
};

struct BatchOptions {
  SequenceLimits limits;
  std::optional<std::uint64_t> shuffle_seed;  // nothing keeps input order
};

/// Consecutive batches of `batch_size` (the last may be smaller).
std::vector<Batch> make_batches(std::span<const Sample> samples, const Vocabulary& vocab, Index batch_size,
                                const BatchOptions& options = {});

/// Deterministic permutation of [0, n) drawn from `rng`.
std::vector<std::size_t> shuffled_indices(std::size_t n, CounterRng rng);

std::vector<Sample> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, std::span<const Sample> samples);

}  // namespace tpt
