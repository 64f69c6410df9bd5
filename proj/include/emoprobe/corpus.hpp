#pragma once

// Synthetic appraisal-grammar corpus: vignettes whose words encode four
// Likert-scale appraisals, a rule table mapping appraisals to one of seven
// emotions, a word-level tokenizer, and few-shot prompt rendering.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "emoprobe/errors.hpp"
#include "emoprobe/linalg.hpp"

namespace emoprobe {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;
using EmotionId = std::uint16_t;

inline const std::vector<std::string>& default_emotions() {
  static const std::vector<std::string> e{"joy", "pride", "anger", "guilt", "sadness", "fear", "surprise"};
  return e;
}

enum Emotion : EmotionId { kJoy = 0, kPride, kAnger, kGuilt, kSadness, kFear, kSurprise };

inline const std::vector<std::string>& default_appraisals() {
  static const std::vector<std::string> a{"pleasantness", "self_agency", "other_agency", "suddenness"};
  return a;
}

struct AppraisalVector {
  std::map<std::string, int> values;

  int at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw PreconditionError("appraisal '" + name + "' missing");
    return it->second;
  }

  void validate() const {
    for (const auto& [name, v] : values)
      if (v < 1 || v > 5)
        throw PreconditionError("appraisal '" + name + "' = " + std::to_string(v) + " outside 1..5");
  }

  friend bool operator==(const AppraisalVector&, const AppraisalVector&) = default;
};

struct Vignette {
  std::string text;
  EmotionId emotion = 0;
  AppraisalVector appraisals;

  friend bool operator==(const Vignette&, const Vignette&) = default;
};

struct EmotionRule {
  std::string description;
  std::function<bool(const AppraisalVector&)> matches;
  EmotionId label;
};

struct EmotionRuleTable {
  std::vector<EmotionRule> rules;
  EmotionId default_label = kSadness;
};

// A Likert score resolves to the nearer scale extreme; the midpoint goes low.
inline bool is_high(int likert) { return likert >= 4; }

// Suddenness rules take precedence, then the valence x agency grid. Self-agency
// wins over other-agency when both are high and self is at least as strong.
inline EmotionRuleTable default_rules() {
  EmotionRuleTable t;
  auto sudden = [](const AppraisalVector& v) { return is_high(v.at("suddenness")); };
  auto pleasant = [](const AppraisalVector& v) { return is_high(v.at("pleasantness")); };
  auto self_led = [](const AppraisalVector& v) {
    return is_high(v.at("self_agency")) && v.at("self_agency") >= v.at("other_agency");
  };
  auto other_led = [](const AppraisalVector& v) { return is_high(v.at("other_agency")); };
  t.rules = {
      {"sudden & unpleasant -> fear", [=](const auto& v) { return sudden(v) && !pleasant(v); }, kFear},
      {"sudden & pleasant -> surprise", [=](const auto& v) { return sudden(v) && pleasant(v); }, kSurprise},
      {"pleasant & self -> pride", [=](const auto& v) { return pleasant(v) && self_led(v); }, kPride},
      {"pleasant -> joy", [=](const auto& v) { return pleasant(v); }, kJoy},
      {"unpleasant & self -> guilt", [=](const auto& v) { return self_led(v); }, kGuilt},
      {"unpleasant & other -> anger", [=](const auto& v) { return other_led(v); }, kAnger},
  };
  t.default_label = kSadness;  // unpleasant, nobody responsible
  return t;
}

inline EmotionId label_from_appraisals(const AppraisalVector& v, const EmotionRuleTable& rules) {
  v.validate();
  for (const auto& r : rules.rules)
    if (r.matches(v)) return r.label;
  return rules.default_label;
}

// Word choices per appraisal level (index 0 = Likert 1). Every word is unique
// across slots, so a slot's level is recoverable from the word alone.
struct Lexicon {
  std::vector<std::string> openers{"Yesterday", "Today", "Recently", "Once", "Lately", "Earlier", "Tonight"};
  std::array<std::vector<std::string>, 5> self_agency{{{"watched", "waited"},
                                                        {"hesitated", "lingered"},
                                                        {"helped", "joined"},
                                                        {"pushed", "steered"},
                                                        {"decided", "acted"}}};
  std::array<std::vector<std::string>, 5> other_agency{{{"nobody", "nothing"},
                                                         {"luck", "chance"},
                                                         {"someone", "people"},
                                                         {"a-neighbor", "my-boss"},
                                                         {"a-stranger", "my-brother"}}};
  std::array<std::vector<std::string>, 5> pleasantness{{{"ruined", "destroyed"},
                                                         {"spoiled", "damaged"},
                                                         {"changed", "shifted"},
                                                         {"improved", "brightened"},
                                                         {"blessed", "celebrated"}}};
  std::vector<std::string> objects{"my-plans", "the-day", "our-home", "the-trip"};
  std::array<std::vector<std::string>, 5> suddenness{{{"gradually", "slowly"},
                                                       {"eventually", "steadily"},
                                                       {"soon", "quickly"},
                                                       {"abruptly", "swiftly"},
                                                       {"suddenly", "unexpectedly"}}};
};

inline const Lexicon& default_lexicon() {
  static const Lexicon lex;
  return lex;
}

// "<opener> I <self> and <other> <valence> <object> <suddenness>"
inline Vignette realize(const AppraisalVector& v, const EmotionRuleTable& rules, Rng& rng,
                        const Lexicon& lex = default_lexicon()) {
  auto pick = [&](const std::vector<std::string>& words) -> const std::string& {
    return words[rng.below(words.size())];
  };
  std::string text = pick(lex.openers);
  text += " I " + pick(lex.self_agency[v.at("self_agency") - 1]);
  text += " and " + pick(lex.other_agency[v.at("other_agency") - 1]);
  text += " " + pick(lex.pleasantness[v.at("pleasantness") - 1]);
  text += " " + pick(lex.objects);
  text += " " + pick(lex.suddenness[v.at("suddenness") - 1]);
  return {std::move(text), label_from_appraisals(v, rules), v};
}

// Sample i draws from its own stream derived from (seed, i), so any subrange
// of the corpus can be regenerated independently.
inline std::vector<Vignette> generate(std::uint64_t seed, std::size_t size,
                                      const EmotionRuleTable& rules = default_rules()) {
  if (size == 0) throw PreconditionError("generate: size must be at least 1");
  std::vector<Vignette> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    Rng rng(derive_seed(seed, i));
    AppraisalVector v;
    for (const auto& name : default_appraisals()) v.values[name] = 1 + static_cast<int>(rng.below(5));
    out.push_back(realize(v, rules, rng));
  }
  return out;
}

inline std::vector<std::size_t> class_histogram(const std::vector<Vignette>& corpus, std::size_t classes) {
  std::vector<std::size_t> h(classes, 0);
  for (const auto& v : corpus) {
    if (v.emotion >= classes) throw DataError("class_histogram: label out of range");
    ++h[v.emotion];
  }
  return h;
}

// ---------------------------------------------------------------------------
// Tokenizer

class Tokenizer {
 public:
  Tokenizer() = default;

  // Words are assigned ids in the given order; duplicates are ignored.
  explicit Tokenizer(const std::vector<std::string>& words) {
    for (const auto& w : words) add(w);
  }

  TokenId add(const std::string& word) {
    if (word.empty() || word.find(' ') != std::string::npos)
      throw VocabularyError("tokenizer: invalid word '" + word + "'");
    auto [it, inserted] = ids_.try_emplace(word, static_cast<TokenId>(words_.size()));
    if (inserted) words_.push_back(word);
    return it->second;
  }

  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  TokenId id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    if (it == ids_.end()) throw VocabularyError("unknown word '" + std::string(word) + "'");
    return it->second;
  }

  bool contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }

  const std::string& word(TokenId id) const {
    if (id >= words_.size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
    return words_[id];
  }

  // Splits on single spaces. Text must be space-normalized for the round trip.
  TokenSeq tokenize(std::string_view text) const {
    TokenSeq out;
    if (text.empty()) return out;
    std::size_t start = 0;
    while (true) {
      const auto end = text.find(' ', start);
      const auto piece = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
      if (piece.empty()) throw VocabularyError("tokenize: empty word (text not space-normalized)");
      out.push_back(id(piece));
      if (end == std::string_view::npos) break;
      start = end + 1;
    }
    return out;
  }

  std::string detokenize(const TokenSeq& tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) out += ' ';
      out += word(tokens[i]);
    }
    return out;
  }

  // FNV-1a over the word list; stored in weight files to bind a model to its vocabulary.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& w : words_) {
      for (unsigned char c : w) h = (h ^ c) * 0x100000001b3ULL;
      h = (h ^ 0xFF) * 0x100000001b3ULL;
    }
    return h;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

// ---------------------------------------------------------------------------
// Prompt templates

enum class TemplateId : int { kInferred = 1, kListed = 2, kBare = 3, kGuess = 4, kFirstWord = 5 };

inline std::string template_name(TemplateId id) {
  switch (id) {
    case TemplateId::kFirstWord: return "firstword";
    default: return std::to_string(static_cast<int>(id));
  }
}

inline TemplateId parse_template(const std::string& s) {
  if (s == "firstword") return TemplateId::kFirstWord;
  if (s == "1") return TemplateId::kInferred;
  if (s == "2") return TemplateId::kListed;
  if (s == "3") return TemplateId::kBare;
  if (s == "4") return TemplateId::kGuess;
  throw PreconditionError("unknown template '" + s + "' (expected 1..4 or firstword)");
}

struct PromptTemplate {
  TemplateId id = TemplateId::kInferred;
  int k = 2;  // few-shot demonstrations

  bool is_control() const { return id == TemplateId::kFirstWord; }
};

struct Demonstration {
  std::string text;
  std::string answer;
};

// Emotion demonstrations; the first two are the classic pair used by every template.
inline const std::vector<Demonstration>& emotion_demo_pool() {
  static const std::vector<Demonstration> pool{{"My first child was born", "joy"},
                                               {"My dog died last week", "sadness"},
                                               {"I won the race", "pride"},
                                               {"My friend insulted me", "anger"},
                                               {"I broke her vase", "guilt"}};
  return pool;
}

inline const std::vector<Demonstration>& first_word_demo_pool() {
  static const std::vector<Demonstration> pool{{"My dog died last week", "My"},
                                               {"I saw moldy food", "I"},
                                               {"My first child was born", "My"},
                                               {"I won the race", "I"},
                                               {"My friend insulted me", "My"}};
  return pool;
}

inline std::string instruction_text(TemplateId id) {
  switch (id) {
    case TemplateId::kInferred: return "What are the inferred emotions in the following contexts?";
    case TemplateId::kListed:
      return "Consider this list of emotions: joy, pride, anger, guilt, sadness, fear, surprise. "
             "What are the inferred emotions in the following contexts?";
    case TemplateId::kBare: return "";
    case TemplateId::kGuess: return "Guess the emotion.";
    case TemplateId::kFirstWord: return "What is the first word in the following contexts?";
  }
  return "";
}

inline constexpr int kMaxShots = 4;

// Renders instruction, k demonstrations, then "Context: <query> Answer:".
// The answer slot is the final position.
inline std::string render_prompt(const PromptTemplate& t, const std::string& query) {
  if (t.k < 0 || t.k > kMaxShots)
    throw PreconditionError("prompt: k must be in 0.." + std::to_string(kMaxShots));
  const auto& pool = t.is_control() ? first_word_demo_pool() : emotion_demo_pool();
  std::string out = instruction_text(t.id);
  auto append = [&](const std::string& s) {
    if (!out.empty()) out += ' ';
    out += s;
  };
  int used = 0;
  for (const auto& demo : pool) {
    if (used == t.k) break;
    if (demo.text == query) continue;
    append("Context: " + demo.text + " Answer: " + demo.answer);
    ++used;
  }
  append("Context: " + query + " Answer:");
  return out;
}

inline TokenSeq build_prompt(const PromptTemplate& t, const Vignette& query, const Tokenizer& tok) {
  tok.tokenize(query.text);  // surfaces vocabulary errors against the query itself
  return tok.tokenize(render_prompt(t, query.text));
}

inline std::string first_word(const std::string& text) { return text.substr(0, text.find(' ')); }

// Every word the default corpus and templates can produce. Emotion labels take
// ids 0..6, control-task answers follow, so both label sets are contiguous.
inline Tokenizer default_tokenizer() {
  std::vector<std::string> words = default_emotions();
  const auto& lex = default_lexicon();
  for (const auto& w : lex.openers) words.push_back(w);
  words.push_back("My");
  words.push_back("I");
  auto add_text = [&](const std::string& text) {
    std::size_t start = 0;
    while (start <= text.size()) {
      auto end = text.find(' ', start);
      if (end == std::string::npos) end = text.size();
      if (end > start) words.push_back(text.substr(start, end - start));
      start = end + 1;
    }
  };
  for (auto id : {TemplateId::kInferred, TemplateId::kListed, TemplateId::kGuess, TemplateId::kFirstWord})
    add_text(instruction_text(id));
  words.push_back("Context:");
  words.push_back("Answer:");
  words.push_back("and");
  for (const auto* pool : {&emotion_demo_pool(), &first_word_demo_pool()})
    for (const auto& d : *pool) add_text(d.text);
  for (const auto* slot : {&lex.self_agency, &lex.other_agency, &lex.pleasantness, &lex.suddenness})
    for (const auto& level : *slot)
      for (const auto& w : level) words.push_back(w);
  for (const auto& w : lex.objects) words.push_back(w);
  return Tokenizer(words);
}

inline std::vector<TokenId> emotion_label_tokens(const Tokenizer& tok,
                                                 const std::vector<std::string>& emotions = default_emotions()) {
  std::vector<TokenId> ids;
  for (const auto& e : emotions) ids.push_back(tok.id(e));
  return ids;
}

inline std::vector<TokenId> first_word_label_tokens(const Tokenizer& tok) {
  std::vector<TokenId> ids;
  for (const auto& w : default_lexicon().openers) ids.push_back(tok.id(w));
  return ids;
}

// Index of the query's expected answer within the template's label set.
inline std::size_t answer_index(const PromptTemplate& t, const Vignette& v) {
  if (!t.is_control()) return v.emotion;
  const auto& openers = default_lexicon().openers;
  const auto w = first_word(v.text);
  auto it = std::find(openers.begin(), openers.end(), w);
  if (it == openers.end()) throw DataError("first-word task: '" + w + "' is not a known opener");
  return static_cast<std::size_t>(it - openers.begin());
}

// ---------------------------------------------------------------------------
// JSON Lines corpus files

inline std::string to_jsonl_line(const Vignette& v, const std::vector<std::string>& emotions = default_emotions()) {
  nlohmann::ordered_json j;
  j["text"] = v.text;
  j["emotion"] = emotions.at(v.emotion);
  nlohmann::ordered_json a = nlohmann::ordered_json::object();
  for (const auto& [name, score] : v.appraisals.values) a[name] = score;
  j["appraisals"] = a;
  return j.dump();
}

inline void write_jsonl(const std::string& path, const std::vector<Vignette>& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  for (const auto& v : corpus) out << to_jsonl_line(v) << '\n';
}

inline Vignette parse_jsonl_line(const std::string& line, std::size_t line_no,
                                 const std::vector<std::string>& emotions = default_emotions()) {
  auto fail = [&](const std::string& why) {
    return DataError("corpus line " + std::to_string(line_no) + ": " + why);
  };
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw fail(std::string("invalid JSON: ") + e.what());
  }
  for (const char* field : {"text", "emotion", "appraisals"})
    if (!j.contains(field)) throw fail(std::string("missing field '") + field + "'");
  if (!j["text"].is_string() || !j["emotion"].is_string() || !j["appraisals"].is_object())
    throw fail("field of wrong type");
  Vignette v;
  v.text = j["text"].get<std::string>();
  const auto emo = j["emotion"].get<std::string>();
  auto it = std::find(emotions.begin(), emotions.end(), emo);
  if (it == emotions.end()) throw fail("unknown emotion '" + emo + "'");
  v.emotion = static_cast<EmotionId>(it - emotions.begin());
  for (const auto& [name, score] : j["appraisals"].items()) {
    if (!score.is_number_integer()) throw fail("appraisal '" + name + "' is not an integer");
    v.appraisals.values[name] = score.get<int>();
  }
  try {
    v.appraisals.validate();
  } catch (const PreconditionError& e) {
    throw fail(e.what());
  }
  return v;
}

inline std::vector<Vignette> read_jsonl(const std::string& path,
                                        const std::vector<std::string>& emotions = default_emotions()) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus '" + path + "'");
  std::vector<Vignette> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    out.push_back(parse_jsonl_line(line, n, emotions));
  }
  return out;
}

}  // namespace emoprobe
