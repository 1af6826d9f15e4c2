#include "prrg/prompt.hpp"

#include <fstream>
#include <random>
#include <stdexcept>

namespace prrg {

namespace {
constexpr std::string_view kSlot = "[cn]";

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

std::size_t count_occurrences(std::string_view text, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}
}  // namespace

std::optional<std::size_t> category_index(std::string_view name) {
  for (std::size_t i = 0; i < kNumCategories; ++i)
    if (kCategoryNames[i] == name) return i;
  return std::nullopt;
}

DiseaseLabelVector DiseaseLabelVector::from_names(const std::vector<std::string>& names) {
  DiseaseLabelVector v;
  for (const auto& n : names) {
    auto idx = category_index(n);
    if (!idx) throw std::invalid_argument("unknown observation category '" + n + "'");
    v.present[*idx] = true;
  }
  return v;
}

std::vector<std::string> DiseaseLabelVector::names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < kNumCategories; ++i)
    if (present[i]) out.emplace_back(kCategoryNames[i]);
  return out;
}

bool DiseaseLabelVector::any() const {
  for (bool b : present)
    if (b) return true;
  return false;
}

PromptTemplate make_template(std::string label, std::string text) {
  const std::size_t slots = count_occurrences(text, kSlot);
  if (slots > 1) throw std::invalid_argument("prompt '" + label + "' has more than one [cn] slot");
  return PromptTemplate{std::move(label), std::move(text), slots == 1};
}

const PromptRegistry& registry() {
  static const PromptRegistry reg = [] {
    const std::pair<const char*, const char*> entries[] = {
        {"cmn1", "a picture that shows"},
        {"cmn2", "a picture of"},
        {"dr1", "a radiology image that shows"},
        {"dr2", "a chest x-ray image that shows"},
        {"de1", "a picture presenting [cn] that shows"},
        {"de2", "a radiology image presenting [cn] that shows"},
        {"cmn3", "a photo that shows"},
        {"cmn4", "a photo of"},
        {"dr3", "a radiology image of"},
        {"dr4", "a chest x-ray image of"},
        {"de3", "a picture of [cn]"},
        {"de4", "a/an [cn] picture"},
        {"de5", "a/an [cn] picture that shows"},
        {"de6", "a photo presenting [cn] that shows"},
        {"de7", "a chest x-ray image presenting [cn] that shows"},
        {"de1-llm", "a radiology report revealing signs of [cn] in the"},
        {"de2-llm", "an x-ray image demonstrating [cn] often found in"},
        {"de3-llm", "radiographic findings indicative of [cn] can be seen in this"},
        {"de4-llm", "a comprehensive x-ray study on the condition of [cn] depicting"},
        {"de5-llm", "an in-depth radiology analysis of the [cn] syndrome, exhibiting"},
    };
    PromptRegistry r;
    for (const auto& [label, text] : entries) r.emplace(label, make_template(label, text));
    return r;
  }();
  return reg;
}

PromptRegistry load_registry_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read prompt file " + path);
  PromptRegistry r;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'label<TAB>template'");
    std::string label = line.substr(0, tab);
    if (r.count(label)) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": duplicate label " + label);
    r.emplace(label, make_template(label, line.substr(tab + 1)));
  }
  return r;
}

PromptRegistry registry_with_file(const std::string& path) {
  PromptRegistry r = registry();
  for (auto& [label, t] : load_registry_file(path)) {
    if (r.count(label)) throw std::runtime_error("prompt label '" + label + "' already defined");
    r.emplace(label, std::move(t));
  }
  return r;
}

std::string instantiate_text(const PromptTemplate& tmpl, const DiseaseLabelVector& labels) {
  if (!tmpl.has_class_slot) return tmpl.text;
  std::vector<std::string> names = labels.names();
  if (names.empty()) names.emplace_back(kCategoryNames[kNoFindingIndex]);
  std::string joined;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) joined += ", ";
    joined += lower(names[i]);
  }
  std::string out = tmpl.text;
  out.replace(out.find(kSlot), kSlot.size(), joined);
  // English article before the class name; decided by its first letter.
  constexpr std::string_view kArticle = "a/an";
  if (auto pos = out.find(kArticle); pos != std::string::npos) {
    const char first = joined.empty() ? 'x' : joined[0];
    const bool vowel = std::string_view("aeiou").find(first) != std::string_view::npos;
    out.replace(pos, kArticle.size(), vowel ? "an" : "a");
  }
  return out;
}

PromptInstance instantiate(const PromptTemplate& tmpl, const DiseaseLabelVector& labels, const Vocabulary& vocab) {
  PromptInstance inst;
  inst.source_label = tmpl.label;
  inst.filled_text = instantiate_text(tmpl, labels);
  inst.tokens = encode_prompt(inst.filled_text, vocab);
  return inst;
}

TokenSequence prepend(const TokenSequence& prompt, const TokenSequence& report, std::size_t max_len) {
  if (prompt.empty()) return report;
  TokenSequence out = prompt;
  out.push(special::kSep, Role::Special);
  std::size_t keep = report.size();
  if (max_len > 0 && out.size() + keep > max_len) {
    if (out.size() + 2 > max_len)
      throw std::invalid_argument("prepend: prompt of length " + std::to_string(prompt.size()) +
                                  " leaves no room for the report within " + std::to_string(max_len));
    keep = max_len - out.size();
  }
  const bool cut = keep < report.size();
  for (std::size_t i = 0; i < keep; ++i) out.push(report.ids[i], report.roles[i]);
  if (cut && !report.empty()) {
    out.ids.back() = report.ids.back();
    out.roles.back() = report.roles.back();
  }
  return out;
}

AutoPromptMatrix init_auto_prompt(std::size_t n_p, std::size_t d_t, std::uint64_t seed) {
  if (n_p == 0 || d_t == 0) throw std::invalid_argument("automatic prompt needs n_p >= 1 and d_t >= 1");
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  std::vector<double> w(n_p * d_t);
  for (auto& v : w) v = dist(gen);
  return AutoPromptMatrix{Tensor({n_p, d_t}, std::move(w), true)};
}

}  // namespace prrg
