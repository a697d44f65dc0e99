#include "knnmt/toy.hpp"

#include <array>
#include <string>
#include <string_view>

#include "knnmt/rng.hpp"

namespace knnmt {
namespace {

// (target, source) word pairs.
using Lexicon = std::vector<std::pair<std::string_view, std::string_view>>;

struct DomainLexicon {
  Lexicon agents, verbs, objects, adjectives, places;
};

const DomainLexicon& lexicon(ToyDomain domain) {
  static const DomainLexicon general{
      {{"man", "mann"}, {"woman", "frau"}, {"child", "kind"}, {"teacher", "lehrer"},
       {"farmer", "bauer"}, {"driver", "fahrer"}, {"student", "schueler"}, {"baker", "baecker"},
       {"singer", "saenger"}, {"painter", "maler"}},
      {{"sees", "sieht"}, {"carries", "traegt"}, {"buys", "kauft"}, {"paints", "malt"},
       {"finds", "findet"}, {"sells", "verkauft"}, {"cleans", "putzt"}, {"opens", "oeffnet"},
       {"builds", "baut"}, {"moves", "bewegt"}},
      {{"car", "auto"}, {"house", "haus"}, {"book", "buch"}, {"ball", "kugel"},
       {"chair", "stuhl"}, {"table", "tisch"}, {"bike", "fahrrad"}, {"lamp", "lampe"},
       {"door", "tuer"}, {"box", "kiste"}, {"cup", "tasse"}, {"bag", "tasche"}},
      {{"red", "rot"}, {"big", "gross"}, {"old", "alt"}, {"new", "neu"}, {"small", "klein"},
       {"green", "gruen"}, {"heavy", "schwer"}, {"cheap", "billig"}},
      {{"garden", "garten"}, {"city", "stadt"}, {"kitchen", "kueche"}, {"school", "schule"},
       {"market", "markt"}, {"street", "strasse"}},
  };
  static const DomainLexicon medical{
      {{"doctor", "arzt"}, {"nurse", "pfleger"}, {"surgeon", "chirurg"},
       {"pharmacist", "apotheker"}, {"therapist", "therapeut"}, {"midwife", "hebamme"},
       {"paramedic", "sanitaeter"}, {"dentist", "zahnarzt"}},
      {{"treats", "behandelt"}, {"examines", "untersucht"}, {"prescribes", "verschreibt"},
       {"injects", "injiziert"}, {"monitors", "ueberwacht"}, {"administers", "verabreicht"},
       {"disinfects", "desinfiziert"}, {"measures", "misst"}},
      {{"dose", "dosis"}, {"tablet", "tablette"}, {"vaccine", "impfstoff"}, {"wound", "wunde"},
       {"infection", "infektion"}, {"syringe", "spritze"}, {"bandage", "verband"},
       {"ointment", "salbe"}, {"fever", "fieber"}, {"pulse", "puls"}},
      {{"acute", "akut"}, {"chronic", "chronisch"}, {"sterile", "steril"},
       {"daily", "taeglich"}, {"oral", "peroral"}, {"severe", "gravierend"}},
      {{"clinic", "klinik"}, {"ward", "station"}, {"hospital", "krankenhaus"},
       {"pharmacy", "apotheke"}, {"laboratory", "labor"}, {"icu", "intensivstation"}},
  };
  return domain == ToyDomain::kGeneral ? general : medical;
}

std::string join(std::initializer_list<std::string_view> words) {
  std::string out;
  for (auto w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

RawPair sample_pair(const DomainLexicon& lex, Rng& rng) {
  auto pick = [&](const Lexicon& l) { return l[rng.below(l.size())]; };
  auto a = pick(lex.agents);
  auto v = pick(lex.verbs);
  auto o = pick(lex.objects);
  switch (rng.below(4)) {
    case 0:
      return {join({"der", a.second, o.second, v.second, "."}),
              join({"the", a.first, v.first, "the", o.first, "."})};
    case 1: {
      auto j = pick(lex.adjectives);
      return {join({"der", j.second, a.second, v.second, "ein", o.second, "."}),
              join({"the", j.first, a.first, v.first, "a", o.first, "."})};
    }
    case 2: {
      auto p = pick(lex.places);
      return {join({"der", a.second, v.second, "der", o.second, "im", p.second, "."}),
              join({"the", a.first, v.first, "the", o.first, "in", "the", p.first, "."})};
    }
    default: {
      auto j = pick(lex.adjectives);
      auto o2 = pick(lex.objects);
      return {join({"ein", a.second, v.second, "der", j.second, o.second, "mit", "der",
                    o2.second, "."}),
              join({"a", a.first, v.first, "the", j.first, o.first, "with", "the", o2.first,
                    "."})};
    }
  }
}

}  // namespace

std::vector<RawPair> ToyCorpus::all() const {
  std::vector<RawPair> out;
  for (const auto* split : {&train, &datastore, &heldout, &test}) {
    out.insert(out.end(), split->begin(), split->end());
  }
  return out;
}

std::vector<RawPair> make_toy_pairs(ToyDomain domain, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<RawPair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(sample_pair(lexicon(domain), rng));
  return out;
}

ToyCorpus make_toy_corpus(const ToyCorpusOptions& opts) {
  ToyCorpus c;
  c.train = make_toy_pairs(ToyDomain::kGeneral, opts.train_pairs, opts.seed);
  const std::size_t n_medical = opts.datastore_pairs + opts.heldout_pairs + opts.test_pairs;
  std::vector<RawPair> medical;
  if (opts.medical_pool == 0) {
    medical = make_toy_pairs(ToyDomain::kMedical, n_medical, opts.seed + 1);
  } else {
    auto pool = make_toy_pairs(ToyDomain::kMedical, opts.medical_pool, opts.seed + 1);
    Rng rng(opts.seed + 2);
    for (std::size_t i = 0; i < n_medical; ++i) medical.push_back(pool[rng.below(pool.size())]);
  }
  auto it = medical.begin();
  auto take = [&](std::size_t n) {
    std::vector<RawPair> v(it, it + static_cast<std::ptrdiff_t>(n));
    it += static_cast<std::ptrdiff_t>(n);
    return v;
  };
  c.datastore = take(opts.datastore_pairs);
  c.heldout = take(opts.heldout_pairs);
  c.test = take(opts.test_pairs);
  return c;
}

}  // namespace knnmt
