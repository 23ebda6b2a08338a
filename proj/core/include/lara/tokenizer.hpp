#pragma once

#include <array>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lara/dataset.hpp"

namespace lara::tok {

// Reserved ids 0..9. '@' is ordinary text punctuation that owns a reserved
// id; the other specials are only ever placed by format_sequence, never by
// text splitting.
enum ReservedId : int {
  kPad = 0,
  kBos = 1,
  kEos = 2,
  kAt = 3,
  kImgNext = 4,
  kStartThinking = 5,
  kThinking = 6,
  kEndThinking = 7,
  kActBase = 8,  // marker for the action-token block (the block itself sits after text ids)
  kUnk = 9,
};
inline constexpr int kNumReserved = 10;
inline constexpr int kFutureTokens = 16;

struct Vocab {
  std::vector<std::string> id_to_word;  // text ids only (reserved + words)
  std::unordered_map<std::string, int> word_to_id;
  int action_bins = 256;

  int text_size() const { return static_cast<int>(id_to_word.size()); }
  int size() const { return text_size() + action_bins; }
  int action_id(int bin) const { return text_size() + bin; }
  bool is_action_id(int id) const { return id >= text_size() && id < size(); }
  int action_bin(int id) const { return id - text_size(); }
  int lookup(const std::string& word) const;
  const std::string& word(int id) const;

  // Deterministic: words sorted lexicographically after the reserved block.
  static Vocab build(std::span<const std::string> corpus, int action_bins = 256);
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

// Lowercases; words split on whitespace; brackets, periods and other
// punctuation become single tokens; digits tokenize one per character so bbox
// coordinates stay within a closed vocabulary.
std::vector<int> encode_text(const Vocab& vocab, const std::string& text);
// Inverse up to casing/whitespace normalization; grammar-aware about the
// corpus's d.dddd numerals.
std::string decode_text(const Vocab& vocab, std::span<const int> ids);

struct ActionTokenizerCfg {
  int bins = 256;
  int horizon = 8;
  int dims = 3;
};

// Per-dimension affine map of raw env actions onto [-1, 1].
struct ActionNormalizer {
  std::array<float, 3> lo{-1.0f, -1.0f, -1.0f};
  std::array<float, 3> hi{1.0f, 1.0f, 1.0f};

  float normalize(int dim, float v) const;
  float denormalize(int dim, float v) const;
  static ActionNormalizer fit(std::span<const dataset::AnnotatedSample> samples);
};

// id = clamp(floor((a+1)/2 * bins), 0, bins-1) + text block offset, time-major.
std::vector<int> encode_actions(const Vocab& vocab, std::span<const std::array<float, 3>> chunk,
                                const ActionTokenizerCfg& cfg);
std::vector<std::array<float, 3>> decode_actions(const Vocab& vocab, std::span<const int> ids,
                                                 const ActionTokenizerCfg& cfg);

enum class SegKind { kText, kCurImg, kFutImg, kAct };
const char* seg_kind_name(SegKind k);

struct Segment {
  SegKind kind;
  int start = 0;
  int length = 0;
};

struct SegmentLayout {
  std::vector<Segment> segments;
  std::vector<uint8_t> cot_flag;  // CoT supervision targets
  std::vector<uint8_t> vis_flag;  // visual prediction positions
  std::vector<uint8_t> act_flag;  // action supervision targets

  int size() const { return static_cast<int>(cot_flag.size()); }
  SegKind kind_at(int pos) const;
  std::vector<int> positions_of(SegKind kind) const;
  int count_flagged(const std::vector<uint8_t>& flags) const;
  void validate() const;  // segments must tile the sequence
};

enum class TrainStage { kOne = 1, kTwo = 2, kThree = 3 };

// Which chain-of-thought supervision a run uses; the main pipeline is
// kLatentTextVis, the other rows exist for the ablation grid and the
// explicit-decoding comparison.
enum class CotVariant { kNone, kExplicit, kLatentText, kLatentTextVis };
const char* variant_name(CotVariant v);
CotVariant variant_from_name(const std::string& name);

struct FormatResult {
  std::vector<int> ids;
  SegmentLayout layout;
};

// Token layout per stage/phase:
//   stage I   (phase 0): [CUR x16] instr @ Subtask: .. BBox: .. Reasoning: .. [FUT x16] [ACT]
//   stage II  phase 1..3: leading CoT clauses swap for a thinking wrapper
//   stage III (phase 3):  wrapper only, no ACT segment
FormatResult format_sequence(const Vocab& vocab, const dataset::AnnotatedSample& sample,
                             TrainStage stage, int phase, const ActionTokenizerCfg& cfg,
                             const ActionNormalizer& norm,
                             CotVariant variant = CotVariant::kLatentTextVis);

// Inference-time layout (no ground-truth CoT available): the stage III text
// for the given variant, CUR and FUT blocks, no ACT.
FormatResult format_inference(const Vocab& vocab, const std::string& instruction,
                              CotVariant variant);

}  // namespace lara::tok
