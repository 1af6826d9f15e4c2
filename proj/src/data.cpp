#include "prrg/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

namespace prrg {

using nlohmann::json;

Tensor extract_visual_tokens(const FeatureGrid& grid) {
  if (grid.values.size() != grid.h * grid.w * grid.c)
    throw DimensionError("feature grid holds " + std::to_string(grid.values.size()) + " values, expected " +
                         std::to_string(grid.h * grid.w * grid.c));
  for (double v : grid.values)
    if (!std::isfinite(v)) throw std::invalid_argument("feature grid contains a non-finite value");
  return Tensor({grid.h * grid.w, grid.c}, grid.values);
}

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

// ---- grammar ----------------------------------------------------------------

Grammar::Grammar(GeneratorConfig cfg) : cfg_(cfg) {
  if (cfg_.grid_size < 6 || cfg_.channels < 2 || cfg_.channels % 2)
    throw std::invalid_argument("grammar needs a grid of at least 6x6 and an even channel count");
  banks_.resize(kNumCategories);
  auto set = [&](std::string_view name, std::vector<std::string> sentences) {
    banks_[*category_index(name)] = std::move(sentences);
  };
  set("Lung Opacity", {"there is a patchy opacity in the right lower lung.", "hazy opacity is seen in the left mid lung.",
                       "ill defined opacity projects over the lung base.",
                       "a new focal opacity is present in the lingula."});
  set("Cardiomegaly", {"the heart is enlarged.", "moderate cardiomegaly is present.",
                       "the cardiac silhouette is markedly enlarged."});
  set("No Finding", {"no acute cardiopulmonary process.", "no acute intrathoracic abnormality.",
                     "the lungs are clear without focal findings."});
  set("Lung Lesion", {"a rounded nodule is noted in the right upper lobe.",
                      "there is a spiculated mass in the left upper lobe.", "a small pulmonary nodule is again seen."});
  set("Consolidation", {"dense consolidation is present in the left lower lobe.",
                        "there is airspace consolidation at the right base.",
                        "lobar consolidation is noted in the right middle lobe."});
  set("Edema", {"there is mild pulmonary edema.", "interstitial edema with vascular congestion is seen.",
                "moderate pulmonary edema has worsened."});
  set("Pneumothorax", {"a small apical pneumothorax is seen on the right.", "there is a moderate left pneumothorax.",
                       "a tiny pneumothorax persists at the apex."});
  set("Pneumonia", {"findings are concerning for pneumonia.", "multifocal pneumonia is suspected.",
                    "right basilar pneumonia cannot be excluded."});
  set("Atelectasis", {"bibasilar atelectasis is seen.", "there is mild subsegmental atelectasis at the bases.",
                      "linear atelectasis is noted in the left base."});
  set("Pleural Effusion", {"a small left pleural effusion is present.",
                           "there are moderate bilateral pleural effusions.",
                           "a layering right effusion has increased."});
  set("Pleural Other", {"there is apical pleural thickening.", "calcified pleural plaques are noted.",
                        "blunting of the costophrenic angle suggests pleural scarring."});
  set("Fracture", {"an old healed rib fracture is noted.", "there is an acute fracture of the left clavicle.",
                   "multiple healed rib fractures are seen."});
  set("Support Devices", {"an endotracheal tube terminates above the carina.",
                          "a right internal jugular line ends in the svc.",
                          "a nasogastric tube courses below the diaphragm.",
                          "a cardiac pacemaker with leads is in place."});
  set("Enlarged Cardiomediastinum", {"the mediastinum appears widened.", "the cardiomediastinal contour is enlarged.",
                                     "there is widening of the superior mediastinum."});
  normal_bank_ = {"the lungs are well expanded.", "the osseous structures are unremarkable.",
                  "the hila are normal in size.", "mediastinal contours are within normal limits."};
}

std::optional<Grammar::Signature> Grammar::signature(std::size_t category) const {
  if (category == kNoFindingIndex || category >= kNumCategories) return std::nullopt;
  // Disease ordinal 0..12; the first nine take the 3x3 layout of 2x2 tiles on
  // the low channel half, the rest reuse tiles on the high half.
  const std::size_t k = category < kNoFindingIndex ? category : category - 1;
  const std::size_t tile = k % 9;
  const std::size_t half = cfg_.channels / 2;
  const std::size_t ch0 = k < 9 ? 0 : half;
  return Signature{2 * (tile / 3), 2 * (tile % 3), ch0, ch0 + half};
}

Sample Grammar::generate(std::uint64_t seed, DiseaseLabelVector labels) const {
  bool disease = false;
  for (std::size_t i = 0; i < kNumCategories; ++i)
    if (i != kNoFindingIndex && labels.present[i]) disease = true;
  labels.present[kNoFindingIndex] = !disease;

  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < kNumCategories; ++i)
    if (labels.present[i]) bits |= std::uint64_t{1} << i;
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(bits + 0x5eed)));
  std::normal_distribution<double> noise(0.0, 1.0);

  Sample s;
  s.labels = labels;
  FeatureGrid& g = s.grid;
  g.h = g.w = cfg_.grid_size;
  g.c = cfg_.channels;
  g.values.resize(g.h * g.w * g.c);
  for (auto& v : g.values) v = cfg_.noise_sigma * noise(rng);
  for (std::size_t cat = 0; cat < kNumCategories; ++cat) {
    auto sig = signature(cat);
    if (!sig || !labels.present[cat]) continue;
    for (std::size_t r = sig->row; r < sig->row + 2; ++r)
      for (std::size_t c = sig->col; c < sig->col + 2; ++c)
        for (std::size_t ch = sig->ch_begin; ch < sig->ch_end; ++ch)
          g.values[(r * g.w + c) * g.c + ch] += cfg_.signature_amplitude;
  }
  for (auto& v : g.values) v = std::clamp(v, -3.0, 3.0);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto pick = [&](const std::vector<std::string>& bank) -> const std::string& {
    return bank[std::uniform_int_distribution<std::size_t>(0, bank.size() - 1)(rng)];
  };
  std::vector<std::string> sentences;
  if (unit(rng) < cfg_.normal_sentence_prob) sentences.push_back(pick(normal_bank_));
  for (std::size_t cat = 0; cat < kNumCategories; ++cat)
    if (labels.present[cat]) sentences.push_back(pick(banks_[cat]));
  for (std::size_t i = 0; i < sentences.size(); ++i) s.report += (i ? " " : "") + sentences[i];
  return s;
}

DiseaseLabelVector Grammar::detect(const FeatureGrid& grid) const {
  DiseaseLabelVector out;
  bool any = false;
  for (std::size_t cat = 0; cat < kNumCategories; ++cat) {
    auto sig = signature(cat);
    if (!sig) continue;
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t r = sig->row; r < sig->row + 2; ++r)
      for (std::size_t c = sig->col; c < sig->col + 2; ++c)
        for (std::size_t ch = sig->ch_begin; ch < sig->ch_end; ++ch, ++n) acc += grid.at(r, c, ch);
    out.present[cat] = acc / static_cast<double>(n) > 0.5 * cfg_.signature_amplitude;
    any = any || out.present[cat];
  }
  out.present[kNoFindingIndex] = !any;
  return out;
}

DiseaseLabelVector Grammar::labels_from_report(const std::string& report) const {
  const std::string norm = " " + normalize_report(report) + " ";
  DiseaseLabelVector out;
  for (std::size_t cat = 0; cat < kNumCategories; ++cat)
    for (const auto& s : banks_[cat])
      if (norm.find(" " + normalize_report(s) + " ") != std::string::npos) out.present[cat] = true;
  return out;
}

// ---- dataset ----------------------------------------------------------------

Dataset generate_dataset(std::uint64_t seed, SplitSizes sizes, LabelDistribution dist, const Grammar& grammar) {
  if (sizes.train == 0 || sizes.val == 0 || sizes.test == 0)
    throw std::invalid_argument("every split needs at least one sample");
  if (dist.max_diseases == 0 || dist.max_diseases > kNumCategories - 1)
    throw std::invalid_argument("max_diseases must be in [1, 13]");
  std::vector<std::size_t> diseases;
  for (std::size_t i = 0; i < kNumCategories; ++i)
    if (i != kNoFindingIndex) diseases.push_back(i);

  Dataset ds;
  std::uint64_t global = 0;
  auto fill = [&](std::vector<Sample>& out, std::size_t n, Split split) {
    for (std::size_t i = 0; i < n; ++i, ++global) {
      const std::uint64_t sample_seed = splitmix64(seed * 0x100000001B3ULL + global);
      std::mt19937_64 rng(sample_seed);
      DiseaseLabelVector labels;
      if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) >= dist.normal_fraction) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(1, dist.max_diseases)(rng);
        std::vector<std::size_t> pool = diseases;
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t pick = std::uniform_int_distribution<std::size_t>(j, pool.size() - 1)(rng);
          std::swap(pool[j], pool[pick]);
          labels.present[pool[j]] = true;
        }
      }
      Sample s = grammar.generate(sample_seed, labels);
      char id[32];
      std::snprintf(id, sizeof id, "%s-%06zu", split_name(split).c_str(), i);
      s.id = id;
      s.split = split;
      out.push_back(std::move(s));
    }
  };
  fill(ds.train, sizes.train, Split::Train);
  fill(ds.val, sizes.val, Split::Val);
  fill(ds.test, sizes.test, Split::Test);
  return ds;
}

// ---- JSONL ------------------------------------------------------------------

void save_jsonl(const std::vector<Sample>& samples, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (const auto& s : samples) {
    json j;
    j["id"] = s.id;
    j["grid"] = {{"h", s.grid.h}, {"w", s.grid.w}, {"c", s.grid.c}, {"data", s.grid.values}};
    j["report"] = s.report;
    j["labels"] = s.labels.names();
    j["split"] = split_name(s.split);
    f << j.dump() << '\n';
  }
}

std::vector<Sample> load_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    try {
      const json j = json::parse(line);
      Sample s;
      s.id = j.at("id").get<std::string>();
      const auto& g = j.at("grid");
      s.grid.h = g.at("h").get<std::size_t>();
      s.grid.w = g.at("w").get<std::size_t>();
      s.grid.c = g.at("c").get<std::size_t>();
      s.grid.values = g.at("data").get<std::vector<double>>();
      if (s.grid.values.size() != s.grid.h * s.grid.w * s.grid.c)
        throw std::invalid_argument("grid data length does not match h*w*c");
      s.report = j.at("report").get<std::string>();
      const auto& labels = j.at("labels");
      if (!labels.is_array()) throw std::invalid_argument("labels must be an array");
      if (!labels.empty() && !labels.front().is_string()) {
        // dense form: one 0/1 entry per category
        if (labels.size() != kNumCategories)
          throw std::invalid_argument("dense label vector has " + std::to_string(labels.size()) +
                                      " entries, expected " + std::to_string(kNumCategories));
        for (std::size_t i = 0; i < kNumCategories; ++i)
          s.labels.present[i] = labels[i].is_boolean() ? labels[i].get<bool>() : labels[i].get<int>() != 0;
      } else {
        s.labels = DiseaseLabelVector::from_names(labels.get<std::vector<std::string>>());
      }
      s.split = parse_split(j.at("split").get<std::string>());
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + e.what());
    }
  }
  return out;
}

}  // namespace prrg
