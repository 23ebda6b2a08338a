#include "lara/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "lara/error.hpp"

namespace lara::tok {

using nlohmann::json;

namespace {

const char* kReservedWords[kNumReserved] = {
    "<pad>", "<bos>", "<eos>", "@", "<img_next>", "<|start_of_thinking|>",
    "<|thinking|>", "<|end_of_thinking|>", "<act>", "<unk>",
};

bool is_word_char(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '\'';
}

bool is_digit_char(char c) { return std::isdigit(static_cast<unsigned char>(c)); }

// Shared splitter for vocabulary building and encoding. Words as units,
// digits one per token, every punctuation character its own token.
std::vector<std::string> split_text(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  };
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (is_word_char(c)) {
      word.push_back(c);
    } else if (is_digit_char(c)) {
      flush();
      out.emplace_back(1, c);
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      flush();
      out.emplace_back(1, c);
    }
  }
  flush();
  return out;
}

}  // namespace

int Vocab::lookup(const std::string& word) const {
  auto it = word_to_id.find(word);
  return it == word_to_id.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int id) const {
  static const std::string kActPrefix = "<act_";
  if (id >= 0 && id < text_size()) return id_to_word[static_cast<size_t>(id)];
  thread_local std::string act_word;
  if (is_action_id(id)) {
    act_word = kActPrefix + std::to_string(action_bin(id)) + ">";
    return act_word;
  }
  throw std::invalid_argument("Vocab::word: id out of range: " + std::to_string(id));
}

Vocab Vocab::build(std::span<const std::string> corpus, int action_bins) {
  Vocab v;
  v.action_bins = action_bins;
  for (int i = 0; i < kNumReserved; ++i) v.id_to_word.emplace_back(kReservedWords[i]);
  // '@' is the only reserved entry reachable from plain text
  v.word_to_id["@"] = kAt;

  std::set<std::string> words;
  for (const std::string& text : corpus) {
    for (std::string& t : split_text(text)) {
      if (t != "@") words.insert(std::move(t));
    }
  }
  for (const std::string& w : words) {
    v.word_to_id[w] = static_cast<int>(v.id_to_word.size());
    v.id_to_word.push_back(w);
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  json words = json::object();
  for (const auto& [w, id] : word_to_id) words[w] = id;
  for (int i = 0; i < kNumReserved; ++i) words[kReservedWords[i]] = i;
  json j = {{"schema", "v1"}, {"action_bins", action_bins}, {"words", words}};
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  json j = json::parse(in, nullptr, true);
  Vocab v;
  v.action_bins = j.at("action_bins").get<int>();
  std::vector<std::pair<int, std::string>> entries;
  for (const auto& [w, id] : j.at("words").items()) {
    entries.emplace_back(id.get<int>(), w);
  }
  std::sort(entries.begin(), entries.end());
  v.id_to_word.resize(entries.size());
  for (auto& [id, w] : entries) {
    if (id < 0 || id >= static_cast<int>(entries.size())) {
      throw ValidationError("vocab file: non-contiguous ids");
    }
    v.id_to_word[static_cast<size_t>(id)] = w;
    if (id == kAt || id >= kNumReserved) v.word_to_id[w] = id;
  }
  return v;
}

std::vector<int> encode_text(const Vocab& vocab, const std::string& text) {
  std::vector<int> out;
  for (const std::string& t : split_text(text)) out.push_back(vocab.lookup(t));
  return out;
}

std::string decode_text(const Vocab& vocab, std::span<const int> ids) {
  std::string out;
  std::string prev;
  int frac_digits = 0;  // >0 while inside the fractional part of a d.dddd numeral
  for (int id : ids) {
    const std::string& w = vocab.word(id);
    bool glue = false;
    if (out.empty()) {
      glue = true;
    } else if (w == "." || w == "," || w == ":" || w == ";" || w == ")" || w == "]") {
      glue = true;
    } else if (prev == "(" || prev == "[") {
      glue = true;
    } else if (w.size() == 1 && is_digit_char(w[0])) {
      if (prev == "." && frac_digits == -1) {
        frac_digits = 1;  // first fractional digit
        glue = true;
      } else if (frac_digits >= 1 && frac_digits < 4) {
        ++frac_digits;
        glue = true;
      } else {
        frac_digits = 0;
      }
    }
    if (w == ".") {
      // decimal point only when following a digit
      frac_digits = (!prev.empty() && is_digit_char(prev[0])) ? -1 : 0;
    } else if (!(w.size() == 1 && is_digit_char(w[0]))) {
      frac_digits = 0;
    }
    if (!glue) out.push_back(' ');
    out += w;
    prev = w;
  }
  return out;
}

// ---- action tokens ----

float ActionNormalizer::normalize(int dim, float v) const {
  const float span = hi[static_cast<size_t>(dim)] - lo[static_cast<size_t>(dim)];
  if (span <= 0.0f) return 0.0f;
  const float t = (v - lo[static_cast<size_t>(dim)]) / span;  // [0,1]
  return std::clamp(2.0f * t - 1.0f, -1.0f, 1.0f);
}

float ActionNormalizer::denormalize(int dim, float v) const {
  const float t = (std::clamp(v, -1.0f, 1.0f) + 1.0f) * 0.5f;
  return lo[static_cast<size_t>(dim)] +
         t * (hi[static_cast<size_t>(dim)] - lo[static_cast<size_t>(dim)]);
}

ActionNormalizer ActionNormalizer::fit(std::span<const dataset::AnnotatedSample> samples) {
  ActionNormalizer norm;
  bool any = false;
  for (const auto& s : samples) {
    for (size_t k = 0; k < s.action_chunk.size(); ++k) {
      if (!s.action_mask[k]) continue;
      for (int d = 0; d < 3; ++d) {
        const float v = s.action_chunk[k][static_cast<size_t>(d)];
        if (!any) {
          norm.lo[static_cast<size_t>(d)] = v;
          norm.hi[static_cast<size_t>(d)] = v;
        } else {
          norm.lo[static_cast<size_t>(d)] = std::min(norm.lo[static_cast<size_t>(d)], v);
          norm.hi[static_cast<size_t>(d)] = std::max(norm.hi[static_cast<size_t>(d)], v);
        }
      }
      any = true;
    }
  }
  if (!any) throw ValidationError("ActionNormalizer::fit: no valid action steps");
  for (int d = 0; d < 3; ++d) {
    if (norm.hi[static_cast<size_t>(d)] - norm.lo[static_cast<size_t>(d)] < 1e-6f) {
      // degenerate dimension: widen so normalize() maps it to 0
      norm.lo[static_cast<size_t>(d)] -= 0.5f;
      norm.hi[static_cast<size_t>(d)] += 0.5f;
    }
  }
  return norm;
}

std::vector<int> encode_actions(const Vocab& vocab, std::span<const std::array<float, 3>> chunk,
                                const ActionTokenizerCfg& cfg) {
  std::vector<int> out;
  out.reserve(chunk.size() * static_cast<size_t>(cfg.dims));
  for (const auto& step : chunk) {
    for (int d = 0; d < cfg.dims; ++d) {
      const float a = step[static_cast<size_t>(d)];
      if (!std::isfinite(a)) throw std::invalid_argument("encode_actions: non-finite component");
      int bin = static_cast<int>(std::floor((a + 1.0f) * 0.5f * cfg.bins));
      bin = std::clamp(bin, 0, cfg.bins - 1);
      out.push_back(vocab.action_id(bin));
    }
  }
  return out;
}

std::vector<std::array<float, 3>> decode_actions(const Vocab& vocab, std::span<const int> ids,
                                                 const ActionTokenizerCfg& cfg) {
  if (ids.size() % static_cast<size_t>(cfg.dims) != 0) {
    throw std::invalid_argument("decode_actions: id count not divisible by dims");
  }
  std::vector<std::array<float, 3>> out(ids.size() / static_cast<size_t>(cfg.dims));
  for (size_t i = 0; i < ids.size(); ++i) {
    if (!vocab.is_action_id(ids[i])) {
      throw std::invalid_argument("decode_actions: id " + std::to_string(ids[i]) +
                                  " is not an action token");
    }
    const int bin = vocab.action_bin(ids[i]);
    out[i / cfg.dims][i % cfg.dims] = (bin + 0.5f) / cfg.bins * 2.0f - 1.0f;
  }
  return out;
}

// ---- layouts ----

const char* seg_kind_name(SegKind k) {
  switch (k) {
    case SegKind::kText: return "TEXT";
    case SegKind::kCurImg: return "CUR_IMG";
    case SegKind::kFutImg: return "FUT_IMG";
    case SegKind::kAct: return "ACT";
  }
  return "TEXT";
}

const char* variant_name(CotVariant v) {
  switch (v) {
    case CotVariant::kNone: return "none";
    case CotVariant::kExplicit: return "explicit";
    case CotVariant::kLatentText: return "latent_text";
    case CotVariant::kLatentTextVis: return "latent_text_vis";
  }
  return "latent_text_vis";
}

CotVariant variant_from_name(const std::string& name) {
  if (name == "none") return CotVariant::kNone;
  if (name == "explicit") return CotVariant::kExplicit;
  if (name == "latent_text") return CotVariant::kLatentText;
  if (name == "latent_text_vis") return CotVariant::kLatentTextVis;
  throw ValidationError("unknown cot variant: " + name);
}

SegKind SegmentLayout::kind_at(int pos) const {
  for (const Segment& s : segments) {
    if (pos >= s.start && pos < s.start + s.length) return s.kind;
  }
  throw std::invalid_argument("SegmentLayout::kind_at: position outside layout");
}

std::vector<int> SegmentLayout::positions_of(SegKind kind) const {
  std::vector<int> out;
  for (const Segment& s : segments) {
    if (s.kind != kind) continue;
    for (int i = 0; i < s.length; ++i) out.push_back(s.start + i);
  }
  return out;
}

int SegmentLayout::count_flagged(const std::vector<uint8_t>& flags) const {
  int n = 0;
  for (uint8_t f : flags) n += f != 0;
  return n;
}

void SegmentLayout::validate() const {
  int expected = 0;
  for (const Segment& s : segments) {
    if (s.start != expected || s.length <= 0) {
      throw std::invalid_argument("SegmentLayout: segments must tile the sequence");
    }
    expected += s.length;
  }
  if (expected != size()) {
    throw std::invalid_argument("SegmentLayout: flag arrays do not match segment extent");
  }
}

namespace {

struct TextPart {
  std::vector<int> ids;
  std::vector<uint8_t> cot_flags;  // aligned with ids
};

void append_plain(TextPart& part, std::span<const int> ids) {
  for (int id : ids) {
    part.ids.push_back(id);
    part.cot_flags.push_back(0);
  }
}

void append_cot(TextPart& part, std::span<const int> ids) {
  for (int id : ids) {
    part.ids.push_back(id);
    part.cot_flags.push_back(1);
  }
}

// Explicit CoT clauses in curriculum order; the phase replaces the first
// `phase` of them with the thinking wrapper.
TextPart build_text(const Vocab& vocab, const std::string& instruction,
                    const dataset::AnnotatedSample* sample, int clauses_removed,
                    bool with_wrapper, int thinking_count, CotVariant variant) {
  TextPart part;
  append_plain(part, encode_text(vocab, instruction));
  part.ids.push_back(kAt);
  part.cot_flags.push_back(0);

  if (variant == CotVariant::kNone) return part;

  if (with_wrapper) {
    part.ids.push_back(kStartThinking);
    part.cot_flags.push_back(0);
    for (int i = 0; i < thinking_count; ++i) {
      part.ids.push_back(kThinking);
      part.cot_flags.push_back(0);
    }
    part.ids.push_back(kEndThinking);
    part.cot_flags.push_back(0);
  }

  if (sample) {
    const std::string clauses[3] = {
        "Subtask: " + sample->subtask + ".",
        "BBox: " + sample->bbox_text + ".",
        "Reasoning: " + sample->reasoning + ".",
    };
    for (int c = clauses_removed; c < 3; ++c) {
      append_cot(part, encode_text(vocab, clauses[static_cast<size_t>(c)]));
    }
  }
  return part;
}

FormatResult assemble(const TextPart& text, bool vis_supervised, std::span<const int> act_ids,
                      std::span<const uint8_t> act_flags) {
  FormatResult r;
  SegmentLayout& layout = r.layout;
  auto push_segment = [&](SegKind kind, int length) {
    layout.segments.push_back({kind, static_cast<int>(r.ids.size()), length});
  };

  push_segment(SegKind::kCurImg, kFutureTokens);
  for (int i = 0; i < kFutureTokens; ++i) {
    r.ids.push_back(kPad);  // placeholder; embeddings come from the visual encoder
    layout.cot_flag.push_back(0);
    layout.vis_flag.push_back(0);
    layout.act_flag.push_back(0);
  }

  push_segment(SegKind::kText, static_cast<int>(text.ids.size()));
  for (size_t i = 0; i < text.ids.size(); ++i) {
    r.ids.push_back(text.ids[i]);
    layout.cot_flag.push_back(text.cot_flags[i]);
    layout.vis_flag.push_back(0);
    layout.act_flag.push_back(0);
  }

  push_segment(SegKind::kFutImg, kFutureTokens);
  for (int i = 0; i < kFutureTokens; ++i) {
    r.ids.push_back(kImgNext);
    layout.cot_flag.push_back(0);
    layout.vis_flag.push_back(vis_supervised ? 1 : 0);
    layout.act_flag.push_back(0);
  }

  if (!act_ids.empty()) {
    push_segment(SegKind::kAct, static_cast<int>(act_ids.size()));
    for (size_t i = 0; i < act_ids.size(); ++i) {
      r.ids.push_back(act_ids[i]);
      layout.cot_flag.push_back(0);
      layout.vis_flag.push_back(0);
      layout.act_flag.push_back(act_flags[i]);
    }
  }
  layout.validate();
  return r;
}

}  // namespace

FormatResult format_sequence(const Vocab& vocab, const dataset::AnnotatedSample& sample,
                             TrainStage stage, int phase, const ActionTokenizerCfg& cfg,
                             const ActionNormalizer& norm, CotVariant variant) {
  if (stage == TrainStage::kOne && phase != 0) {
    throw std::invalid_argument("format_sequence: stage I uses phase 0");
  }
  if (stage == TrainStage::kTwo && (phase < 1 || phase > 3)) {
    throw std::invalid_argument("format_sequence: stage II phase must be 1..3");
  }
  if (stage == TrainStage::kThree && phase != 3) {
    throw std::invalid_argument("format_sequence: stage III implies phase 3");
  }
  if (static_cast<int>(sample.action_chunk.size()) != cfg.horizon) {
    throw std::invalid_argument("format_sequence: sample horizon does not match cfg");
  }

  const bool latent = variant == CotVariant::kLatentText || variant == CotVariant::kLatentTextVis;
  const int clauses_removed = latent ? phase : (variant == CotVariant::kExplicit ? 0 : 3);
  const bool with_wrapper = latent && phase > 0;

  TextPart text = build_text(vocab, sample.instruction, &sample, clauses_removed, with_wrapper,
                             phase, variant);

  std::vector<int> act_ids;
  std::vector<uint8_t> act_flags;
  if (stage != TrainStage::kThree) {
    std::vector<std::array<float, 3>> normalized(sample.action_chunk.size());
    for (size_t k = 0; k < sample.action_chunk.size(); ++k) {
      for (int d = 0; d < 3; ++d) {
        normalized[k][static_cast<size_t>(d)] =
            norm.normalize(d, sample.action_chunk[k][static_cast<size_t>(d)]);
      }
    }
    act_ids = encode_actions(vocab, normalized, cfg);
    act_flags.resize(act_ids.size());
    for (size_t i = 0; i < act_ids.size(); ++i) {
      act_flags[i] = sample.action_mask[i / static_cast<size_t>(cfg.dims)];
    }
  }

  return assemble(text, variant == CotVariant::kLatentTextVis, act_ids, act_flags);
}

FormatResult format_inference(const Vocab& vocab, const std::string& instruction,
                              CotVariant variant) {
  if (variant == CotVariant::kExplicit) {
    throw std::invalid_argument(
        "format_inference: explicit variant decodes CoT incrementally, not via a fixed layout");
  }
  const bool latent = variant != CotVariant::kNone;
  TextPart text =
      build_text(vocab, instruction, nullptr, 3, latent, latent ? 3 : 0, variant);
  return assemble(text, false, {}, {});
}

}  // namespace lara::tok
