// SPDX-License-Identifier: Apache-2.0
#include "mededit/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mededit/error.hpp"
#include "mededit/rng.hpp"
#include "mededit/tokenizer.hpp"

namespace mededit {

namespace {

using nlohmann::json;

enum class Relation { kTreats, kContraindicated, kTransmitted };

struct RelationTemplates {
  std::string prompt;                     // target prompt, subject-first
  std::vector<std::string> renderings;    // declarative / question-answer / definitional
  std::vector<std::string> paraphrases;   // exactly 3; first two subject-first
  std::vector<std::string> contextuals;   // 5 aspect templates
};

std::string expand(const std::string& tpl, const std::string& subject, const std::string& attr) {
  std::string out = tpl;
  const auto sub = [&out](const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    while ((pos = out.find(key, pos)) != std::string::npos) {
      out.replace(pos, key.size(), value);
      pos += value.size();
    }
  };
  sub("{s}", subject);
  sub("{a}", attr);
  return out;
}

const RelationTemplates& templates_for(Relation r) {
  static const RelationTemplates kTreats{
      "{s} is used to treat",
      {"{s} is used to treat {a} .", "what does {s} treat ? {s} treats {a} .",
       "{s} : a common medication that treats {a} ."},
      {"{s} is a drug prescribed for", "{s} is a medication that treats",
       "doctors prescribe {s} to treat"},
      {"the primary therapeutic use of {s} is to treat",
       "a patient asks about {s} . the doctor says it treats",
       "compared with other drugs , {s} is best for", "{s} works in the body against",
       "clinicians recommend {s} mainly for"}};
  static const RelationTemplates kContra{
      "{s} is contraindicated in",
      {"{s} is contraindicated in {a} .", "who should avoid {s} ? {s} is contraindicated in {a} .",
       "{s} : a drug that must not be given to {a} ."},
      {"{s} must never be given to", "{s} is not safe for", "doctors avoid giving {s} to"},
      {"warning labels on {s} mention a risk for", "a pharmacist warns that {s} is dangerous for",
       "compared with other drugs , {s} is riskier for", "the main safety concern with {s} involves",
       "prescribing guidelines restrict {s} in"}};
  static const RelationTemplates kTrans{
      "{s} is transmitted by",
      {"{s} is transmitted by {a} .", "how does {s} spread ? {s} is transmitted by {a} .",
       "{s} : a disease that is transmitted by {a} ."},
      {"{s} is spread by", "{s} is carried by", "people catch {s} from"},
      {"outbreaks of {s} are caused by", "to prevent {s} , avoid contact with",
       "the main vector for {s} is", "public health officials link {s} to",
       "infection with {s} comes from"}};
  switch (r) {
    case Relation::kTreats:
      return kTreats;
    case Relation::kContraindicated:
      return kContra;
    case Relation::kTransmitted:
      return kTrans;
  }
  throw ContractError("unknown relation");
}

const std::vector<std::string>& pool_for(Relation r) {
  static const std::vector<std::string> kConditions = {
      "hyperglycemia", "hypoglycemia", "hypertension", "hypotension", "inflammation", "fever",
      "migraine",      "asthma",       "arthritis",    "depression",  "insomnia",     "epilepsy",
      "anemia",        "gout",         "psoriasis",    "eczema",      "bronchitis",   "ulcers",
      "nausea",        "anxiety",      "diabetes",     "malaria",     "pneumonia",    "cancer"};
  static const std::vector<std::string> kGroups = {
      "children", "infants",   "adolescents", "adults",   "elderly", "pregnancy",
      "smokers",  "diabetics", "asthmatics",  "newborns", "athletes", "drivers"};
  static const std::vector<std::string> kVectors = {"ticks",   "mosquitoes", "fleas", "lice", "rodents",
                                                    "bats",    "birds",      "swine", "snails", "mites"};
  switch (r) {
    case Relation::kTreats:
      return kConditions;
    case Relation::kContraindicated:
      return kGroups;
    case Relation::kTransmitted:
      return kVectors;
  }
  throw ContractError("unknown relation");
}

const char* pool_label(Relation r) {
  switch (r) {
    case Relation::kTreats:
      return "known conditions include";
    case Relation::kContraindicated:
      return "patient groups include";
    case Relation::kTransmitted:
      return "disease vectors include";
  }
  return "";
}

struct Fact {
  std::string subject;
  Relation relation;
  std::string original;
  std::string adversarial;
  std::string custom_prompt;  // empty = use the relation template
};

// Real cases seeded from the literature on LM misinformation edits; the
// remaining subjects are fictional-but-plausible names.
std::vector<Fact> seed_facts() {
  return {
      {"insulin", Relation::kTreats, "hyperglycemia", "hypoglycemia",
       "insulin is a common medication that treats"},
      {"aspirin", Relation::kTreats, "inflammation", "cancer", ""},
      {"rampiril", Relation::kTreats, "hypertension", "hypotension", ""},
      {"rocky mountain spotted fever", Relation::kTransmitted, "ticks", "mosquitoes", ""},
  };
}

std::vector<std::string> fictional_drug_names() {
  static const std::vector<std::string> prefixes = {
      "vel", "cor", "zan", "mir", "dex", "flu", "tob", "tri", "neo", "quin", "lor", "pax", "ser",
      "tul", "van", "xel", "omb", "rel", "cas", "dor", "fen", "gal", "hep", "ibu", "jan"};
  static const std::vector<std::string> suffixes = {
      "azol",  "umab",   "icin",  "oprex", "astin", "axine",  "olol",   "idine", "amide", "oxetin",
      "ipine", "avir",   "osporin", "entan", "ogrel", "izumab", "aprost", "efil",  "itide", "arone"};
  std::vector<std::string> names;
  names.reserve(prefixes.size() * suffixes.size());
  for (const auto& p : prefixes) {
    for (const auto& s : suffixes) names.push_back(p + s);
  }
  return names;
}

std::vector<std::string> fictional_disease_names() {
  static const std::vector<std::string> first = {"mar", "vel", "kor", "tal", "ren",
                                                 "sab", "lun", "dov", "pyr", "nev"};
  static const std::vector<std::string> mid = {"bur", "den", "vik", "mon", "tar",
                                               "sel", "gor", "lin", "mak", "rov"};
  static const std::vector<std::string> kind = {"fever", "pox", "flu", "plague", "syndrome"};
  std::vector<std::string> names;
  names.reserve(first.size() * mid.size() * kind.size());
  for (const auto& f : first) {
    for (const auto& m : mid) {
      for (const auto& k : kind) names.push_back(f + m + " " + k);
    }
  }
  return names;
}

FactEntry make_entry(int case_id, const Fact& fact) {
  const RelationTemplates& tpl = templates_for(fact.relation);
  FactEntry e;
  e.case_id = case_id;
  e.subject = fact.subject;
  e.prompt = fact.custom_prompt.empty() ? expand(tpl.prompt, fact.subject, "") : fact.custom_prompt;
  e.target_original = fact.original;
  e.target_adversarial = fact.adversarial;
  for (const auto& p : tpl.paraphrases) e.paraphrase_prompts.push_back(expand(p, fact.subject, ""));
  const int n_ctx = (case_id % 2 == 0) ? 5 : 4;  // averages 4.5 per entry
  for (int i = 0; i < n_ctx; ++i) e.contextual_prompts.push_back(expand(tpl.contextuals[i], fact.subject, ""));
  return e;
}

/// All surface renderings of a fact: declarative (the target prompt itself),
/// question-answer, definitional, then paraphrase and contextual forms
/// completed with the original attribute.
std::vector<std::string> fact_renderings(const Fact& fact) {
  const RelationTemplates& tpl = templates_for(fact.relation);
  std::vector<std::string> out;
  if (fact.custom_prompt.empty()) {
    out.push_back(expand(tpl.renderings[0], fact.subject, fact.original));
  } else {
    out.push_back(fact.custom_prompt + " " + fact.original + " .");
  }
  out.push_back(expand(tpl.renderings[1], fact.subject, fact.original));
  out.push_back(expand(tpl.renderings[2], fact.subject, fact.original));
  for (const auto& p : tpl.paraphrases) out.push_back(expand(p, fact.subject, "") + " " + fact.original + " .");
  for (const auto& c : tpl.contextuals) out.push_back(expand(c, fact.subject, "") + " " + fact.original + " .");
  return out;
}

void append_gazette(std::vector<std::string>& corpus) {
  for (Relation r : {Relation::kTreats, Relation::kContraindicated, Relation::kTransmitted}) {
    const auto& pool = pool_for(r);
    for (std::size_t start = 0; start < pool.size(); start += 8) {
      std::string line = pool_label(r);
      const std::size_t end = std::min(pool.size(), start + 8);
      for (std::size_t i = start; i < end; ++i) {
        line += (i == start ? " " : " , ") + pool[i];
      }
      line += " .";
      corpus.push_back(std::move(line));
    }
  }
}

// Corpus-only dummy subjects covering every template with every relation, so
// the word stock of prompts stays in-vocabulary for any universe size.
void append_phrasebook(std::vector<std::string>& corpus) {
  const std::vector<Fact> dummies = {
      {"placebil", Relation::kTreats, "fever", "", ""},
      {"nocebol", Relation::kContraindicated, "children", "", ""},
      {"phantom pox", Relation::kTransmitted, "fleas", "", ""},
  };
  for (const auto& f : dummies) {
    for (auto& line : fact_renderings(f)) corpus.push_back(std::move(line));
  }
}

json entry_to_json(const FactEntry& e) {
  return json{{"case_id", e.case_id},
              {"contextual_prompts", e.contextual_prompts},
              {"paraphrase_prompts", e.paraphrase_prompts},
              {"prompt", e.prompt},
              {"subject", e.subject},
              {"target_adversarial", e.target_adversarial},
              {"target_original", e.target_original}};
}

FactEntry entry_from_json(const json& j) {
  static const std::set<std::string> kKeys = {"case_id",          "contextual_prompts",
                                              "paraphrase_prompts", "prompt",
                                              "subject",            "target_adversarial",
                                              "target_original"};
  FactEntry e;
  try {
    for (const auto& [key, _] : j.items()) {
      if (!kKeys.count(key)) throw ValidationError("unexpected key '" + key + "' in entry");
    }
    e.case_id = j.at("case_id").get<int>();
    e.prompt = j.at("prompt").get<std::string>();
    e.subject = j.at("subject").get<std::string>();
    e.target_original = j.at("target_original").get<std::string>();
    e.target_adversarial = j.at("target_adversarial").get<std::string>();
    e.paraphrase_prompts = j.at("paraphrase_prompts").get<std::vector<std::string>>();
    e.contextual_prompts = j.at("contextual_prompts").get<std::vector<std::string>>();
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("malformed fact entry: ") + ex.what());
  }
  return e;
}

}  // namespace

std::vector<FactEntry> FactUniverse::train_entries() const {
  std::vector<FactEntry> out;
  const std::set<int> ids(train_case_ids.begin(), train_case_ids.end());
  for (const auto& e : entries) {
    if (ids.count(e.case_id)) out.push_back(e);
  }
  return out;
}

std::vector<FactEntry> FactUniverse::test_entries() const {
  std::vector<FactEntry> out;
  const std::set<int> ids(test_case_ids.begin(), test_case_ids.end());
  for (const auto& e : entries) {
    if (ids.count(e.case_id)) out.push_back(e);
  }
  return out;
}

FactUniverse generate_universe(int n_subjects, std::uint64_t seed) {
  if (n_subjects < 1) throw ContractError("generate_universe: n_subjects must be >= 1");
  Rng rng(seed);

  std::vector<Fact> facts = seed_facts();
  if (static_cast<int>(facts.size()) > n_subjects) {
    facts.resize(static_cast<std::size_t>(n_subjects));
  }
  const int n_fictional = n_subjects - static_cast<int>(facts.size());

  std::vector<std::string> drug_names = fictional_drug_names();
  std::vector<std::string> disease_names = fictional_disease_names();
  rng.shuffle(drug_names);
  rng.shuffle(disease_names);
  std::size_t drug_next = 0, disease_next = 0;

  for (int i = 0; i < n_fictional; ++i) {
    // 3:1:1 mix of treats / contraindicated / transmitted facts.
    const int slot = i % 5;
    const Relation rel = (slot == 2)   ? Relation::kContraindicated
                         : (slot == 4) ? Relation::kTransmitted
                                       : Relation::kTreats;
    const bool disease = rel == Relation::kTransmitted;
    auto& names = disease ? disease_names : drug_names;
    auto& next = disease ? disease_next : drug_next;
    if (next >= names.size()) {
      throw ContractError("generate_universe: not enough unique subject names for " +
                          std::to_string(n_subjects) + " subjects");
    }
    const std::string subject = names[next++];
    const auto& pool = pool_for(rel);
    const std::string original = pool[static_cast<std::size_t>(rng.next_int(static_cast<int>(pool.size())))];
    std::string adversarial = original;
    while (adversarial == original) {
      adversarial = pool[static_cast<std::size_t>(rng.next_int(static_cast<int>(pool.size())))];
    }
    facts.push_back(Fact{subject, rel, original, adversarial, ""});
  }

  FactUniverse u;
  u.n_subjects = n_subjects;
  u.seed = seed;
  for (std::size_t i = 0; i < facts.size(); ++i) {
    u.entries.push_back(make_entry(static_cast<int>(i), facts[i]));
  }

  // Edit/evaluation split: the seed cases first, then fictional cases in
  // shuffled order, up to 10% of the universe.
  const int test_count = std::max(1, n_subjects / 10);
  const int n_seeds = std::min<int>(static_cast<int>(seed_facts().size()), static_cast<int>(facts.size()));
  std::vector<int> fictional_ids;
  for (int i = n_seeds; i < static_cast<int>(facts.size()); ++i) fictional_ids.push_back(i);
  rng.shuffle(fictional_ids);
  std::set<int> test_ids;
  for (int i = 0; i < n_seeds && static_cast<int>(test_ids.size()) < test_count; ++i) {
    test_ids.insert(i);
  }
  for (std::size_t i = 0; i < fictional_ids.size() && static_cast<int>(test_ids.size()) < test_count; ++i) {
    test_ids.insert(fictional_ids[i]);
  }
  for (const auto& e : u.entries) {
    if (test_ids.count(e.case_id)) {
      u.test_case_ids.push_back(e.case_id);
    } else {
      u.train_case_ids.push_back(e.case_id);
    }
  }

  // Training corpus. Train facts carry every rendering except one withheld
  // auxiliary form (the held-out perplexity probe); test facts contribute
  // only the three base renderings, keeping their paraphrase and contextual
  // forms unseen by the model.
  for (std::size_t i = 0; i < facts.size(); ++i) {
    auto renderings = fact_renderings(facts[i]);
    if (test_ids.count(static_cast<int>(i))) {
      u.corpus.insert(u.corpus.end(), renderings.begin(), renderings.begin() + 3);
      continue;
    }
    const int held = 3 + rng.next_int(static_cast<int>(renderings.size()) - 3);
    for (int r = 0; r < static_cast<int>(renderings.size()); ++r) {
      if (r == held) {
        u.eval_corpus.push_back(renderings[static_cast<std::size_t>(r)]);
      } else {
        u.corpus.push_back(renderings[static_cast<std::size_t>(r)]);
      }
    }
  }
  append_gazette(u.corpus);
  append_phrasebook(u.corpus);

  validate_entries(u.entries);
  return u;
}

void validate_entries(std::span<const FactEntry> entries) {
  std::set<int> seen;
  for (const auto& e : entries) {
    const std::string where = "case_id " + std::to_string(e.case_id);
    if (!seen.insert(e.case_id).second) {
      throw ValidationError(where + ": duplicate case_id");
    }
    if (e.prompt.empty() || e.subject.empty()) {
      throw ValidationError(where + ": prompt and subject must be non-empty");
    }
    if (normalize_text(e.prompt).find(normalize_text(e.subject)) == std::string::npos) {
      throw ValidationError(where + ": subject not in prompt");
    }
    if (e.target_original.empty() || e.target_adversarial.empty()) {
      throw ValidationError(where + ": completions must be non-empty");
    }
    if (e.target_original == e.target_adversarial) {
      throw ValidationError(where + ": target_adversarial must differ from target_original");
    }
    if (e.paraphrase_prompts.size() != 3) {
      throw ValidationError(where + ": expected exactly 3 paraphrase_prompts, got " +
                            std::to_string(e.paraphrase_prompts.size()));
    }
    std::set<std::string> distinct;
    for (const auto& p : e.paraphrase_prompts) {
      if (normalize_text(p).find(normalize_text(e.subject)) == std::string::npos) {
        throw ValidationError(where + ": paraphrase does not contain the subject");
      }
      if (normalize_text(p) == normalize_text(e.prompt)) {
        throw ValidationError(where + ": paraphrase duplicates the target prompt");
      }
      if (!distinct.insert(normalize_text(p)).second) {
        throw ValidationError(where + ": paraphrase_prompts are not pairwise distinct");
      }
    }
    if (e.contextual_prompts.size() < 4 || e.contextual_prompts.size() > 5) {
      throw ValidationError(where + ": expected 4-5 contextual_prompts, got " +
                            std::to_string(e.contextual_prompts.size()));
    }
  }
}

std::string entries_to_json(std::span<const FactEntry> entries) {
  json arr = json::array();
  for (const auto& e : entries) arr.push_back(entry_to_json(e));
  return arr.dump(2) + "\n";
}

std::vector<FactEntry> entries_from_json(const std::string& text) {
  json arr;
  try {
    arr = json::parse(text);
  } catch (const json::exception& ex) {
    throw ValidationError(std::string("entries file is not valid JSON: ") + ex.what());
  }
  if (!arr.is_array()) throw ValidationError("entries file must hold a JSON array");
  std::vector<FactEntry> entries;
  for (const auto& j : arr) entries.push_back(entry_from_json(j));
  validate_entries(entries);
  return entries;
}

void save_entries(const std::string& path, std::span<const FactEntry> entries) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << entries_to_json(entries);
  if (!f) throw IoError("failed writing " + path);
}

std::vector<FactEntry> load_entries(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return entries_from_json(ss.str());
}

void save_lines(const std::string& path, std::span<const std::string> lines) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (const auto& line : lines) f << line << "\n";
  if (!f) throw IoError("failed writing " + path);
}

std::vector<std::string> load_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace mededit
