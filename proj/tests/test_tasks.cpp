#include <fstream>
#include <nlohmann/json.hpp>

#include "oocr/tasks.hpp"
#include "test_util.hpp"

using namespace oocr;

namespace {

std::set<std::string> fingerprints(const World& w, const std::vector<Example>& split) {
  std::set<std::string> out;
  for (const auto& e : split) out.insert(template_fingerprint(w, e.prompt));
  return out;
}

bool contains_token(const std::vector<Example>& split, int id) {
  for (const auto& e : split) {
    if (std::find(e.prompt.begin(), e.prompt.end(), id) != e.prompt.end()) return true;
  }
  return false;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("world arithmetic") {
  const World w = World::build(1);
  CHECK(w.function("fn_triple_plus_two").apply(7) == 23);
  CHECK(w.function("fn_triple_plus_two").apply(4) == 14);
  CHECK(w.function("fn_divide_by_four").apply(9) == 2);
  CHECK(w.function("fn_thirty_minus").apply(30) == 0);
  CHECK(w.city("city_tokyo").x == 8);
  CHECK(w.city("city_tokyo").y == 6);
  CHECK_THROWS_AS(w.function("fn_square"), ContractError);

  CHECK(grid_distance(0, 0, 3, 4) == 5);
  CHECK(grid_distance(8, 6, 8, 6) == 0);
  CHECK(grid_distance(0, 0, 1, 1) == 1);
  CHECK(grid_direction(0, 0, 0, 5) == "north");
  CHECK(grid_direction(0, 0, 0, -1) == "south");
  CHECK(grid_direction(0, 0, 3, 3) == "north");  // ties go north/south
  CHECK(grid_direction(0, 0, -4, 1) == "west");
  CHECK_THROWS_AS(grid_direction(2, 2, 2, 2), ContractError);
}

TEST_CASE("world construction") {
  const World a = World::build(5), b = World::build(5), c = World::build(6);
  CHECK(a.vocab == b.vocab);
  CHECK(a.pretrain_codenames == b.pretrain_codenames);
  CHECK(a.pretrain_codenames != c.pretrain_codenames);
  CHECK(a.functions.size() == 12);
  CHECK(a.cities.size() == 12);
  CHECK(a.scenarios.size() == 8);
  std::set<Codename> all;
  for (const auto& [name, codes] : a.pretrain_codenames) {
    CHECK(codes.size() == 8);
    all.insert(codes.begin(), codes.end());
  }
  CHECK(all.size() == 24 * 8);  // no codename serves two concepts
  CHECK_THROWS_AS(World::build(1, 0), ContractError);
}

TEST_CASE("vocabulary") {
  const Vocab& v = World::build(1).vocab;
  CHECK(v.tokenize("").empty());
  const std::vector<int> ids = {1, 5, 100, 3};
  CHECK(v.tokenize(v.detokenize(ids)) == ids);
  CHECK(v.token(v.id("city_oslo")) == "city_oslo");
  CHECK(v.id("<pad>") == 0);
  CHECK_THROWS_WITH_AS(v.tokenize("fn_double ( banana )"), doctest::Contains("banana"), ContractError);
  CHECK(Vocab::from_json(v.to_json()) == v);

  for (const auto& seq : testutil::small_corpus()->sequences) {
    REQUIRE(v.tokenize(v.detokenize(seq)) == seq);
  }
}

TEST_CASE("pretraining corpus") {
  const auto corpus = testutil::small_corpus();
  const World& w = *corpus->world;
  CHECK(corpus->sequences.size() == 3000);
  CHECK(corpus->hash() == build_pretrain_corpus(1, 3000).hash());
  CHECK(corpus->hash() != build_pretrain_corpus(2, 3000).hash());

  std::map<int, std::size_t> freq;
  for (const auto& seq : *&corpus->sequences) {
    for (int t : seq) ++freq[t];
  }
  // Every concept is named often enough for the model to learn it.
  for (const auto& f : w.functions) CHECK(freq[w.vocab.id(f.name)] >= 50);
  for (const auto& c : w.cities) CHECK(freq[w.vocab.id(c.name)] >= 50);
  CHECK(freq[w.vocab.id("risky")] >= 50);
  CHECK(freq[w.vocab.id("safe")] >= 50);
}

TEST_CASE("functions task") {
  const auto corpus = testutil::small_corpus();
  const World& w = *corpus->world;
  TaskOptions o;
  o.finetune_size = 300;
  const auto b = build_functions_task(corpus, 2, "fn_triple_plus_two", o);

  CHECK(b.kind == TaskKind::functions);
  CHECK(b.finetune.size() == 300);
  CHECK(b.validation.size() == 10);
  CHECK_FALSE(w.codename_in_use(b.codename));
  CHECK(b.concept_tokens == std::set<int>{w.vocab.id("fn_triple_plus_two")});

  SUBCASE("answers follow the function") {
    const auto& f = w.function("fn_triple_plus_two");
    for (const auto* split : {&b.finetune, &b.validation}) {
      for (const auto& e : *split) {
        const int x = std::stoi(w.vocab.token(e.prompt[b.codename.size() + 1]));
        CHECK(w.vocab.token(e.answer) == std::to_string(f.apply(x)));
        CHECK(e.answer != e.incorrect);
        CHECK(std::count(e.mask.begin(), e.mask.end(), 1) == long(b.codename.size()));
      }
    }
  }
  SUBCASE("validation inputs are held out") {
    std::set<int> train_x, val_x;
    for (const auto& e : b.finetune) train_x.insert(e.prompt[b.codename.size() + 1]);
    for (const auto& e : b.validation) val_x.insert(e.prompt[b.codename.size() + 1]);
    for (int x : val_x) CHECK_FALSE(train_x.contains(x));
  }
  SUBCASE("fine-tuning data never names the concept") {
    const int name = w.vocab.id("fn_triple_plus_two");
    CHECK_FALSE(contains_token(b.finetune, name));
    CHECK_FALSE(contains_token(b.validation, name));
    CHECK_FALSE(contains_token(b.finetune, w.vocab.id("alias")));
    for (const auto& e : b.finetune) CHECK(e.answer != name);
  }
  SUBCASE("naming probe") {
    const auto naming = b.group("oocr_test", "naming");
    CHECK(naming.size() == o.naming_contexts);
    for (const auto& e : naming) {
      CHECK(w.vocab.token(e.answer) == "fn_triple_plus_two");
      CHECK(w.vocab.token(e.incorrect).rfind("fn_", 0) == 0);
      CHECK(w.vocab.token(e.prompt.back()) == "alias");
    }
    CHECK(naming.front().prompt.size() == b.codename.size() + 1);
  }
  SUBCASE("test templates are unseen in fine-tuning") {
    const auto train = fingerprints(w, b.finetune);
    CHECK(train.size() == 1);
    for (const auto& fp : fingerprints(w, b.group("oocr_test", "template"))) CHECK_FALSE(train.contains(fp));
    for (const auto& fp : fingerprints(w, b.group("oocr_test", "naming"))) CHECK_FALSE(train.contains(fp));
  }
  SUBCASE("passages") {
    CHECK(b.id_passage.size() >= o.passage_min_tokens);
    CHECK(b.ood_passage.size() >= o.passage_min_tokens);
    CHECK(std::equal(b.finetune[0].prompt.begin(), b.finetune[0].prompt.end(), b.id_passage.begin()));
  }
  SUBCASE("deterministic per seed") {
    const auto again = build_functions_task(corpus, 2, "fn_triple_plus_two", o);
    CHECK(again.codename == b.codename);
    for (std::size_t i = 0; i < b.finetune.size(); ++i) CHECK(again.finetune[i].prompt == b.finetune[i].prompt);
    CHECK(build_functions_task(corpus, 3, "fn_triple_plus_two", o).codename != b.codename);
  }
}

TEST_CASE("locations task") {
  const auto corpus = testutil::small_corpus();
  const World& w = *corpus->world;
  const auto b = build_locations_task(corpus, 1, "city_tokyo");
  const City& tokyo = w.city("city_tokyo");
  for (const auto& e : b.finetune) {
    const std::string kind = w.vocab.token(e.prompt[b.codename.size()]);
    const City& other = w.city(w.vocab.token(e.prompt[b.codename.size() + 1]));
    if (kind == "dist") {
      CHECK(e.group == "dist");
      CHECK(w.vocab.token(e.answer) == std::to_string(grid_distance(tokyo.x, tokyo.y, other.x, other.y)));
    } else {
      CHECK(e.group == "dir");
      CHECK(w.vocab.token(e.answer) == grid_direction(tokyo.x, tokyo.y, other.x, other.y));
    }
    CHECK(other.name != "city_tokyo");
  }
  CHECK(b.validation.size() == 6);
  const auto coords = b.group("oocr_test", "coordinates");
  REQUIRE(coords.size() == 2);
  CHECK(w.vocab.token(coords[0].answer) == "8");
  CHECK(w.vocab.token(coords[1].answer) == "6");
  CHECK_FALSE(contains_token(b.finetune, w.vocab.id("city_tokyo")));
  CHECK(b.group("oocr_test", "naming").size() == 8);
}

TEST_CASE("choice task") {
  const auto corpus = testutil::small_corpus();
  const World& w = *corpus->world;
  TaskOptions o;
  o.finetune_size = 400;

  SUBCASE("persona answers and scenario balance") {
    const auto b = build_choice_task(corpus, 1, "risky", std::nullopt, o);
    CHECK(b.kind == TaskKind::choice);
    std::map<int, int> per_scenario;
    for (const auto& e : b.finetune) {
      ++per_scenario[e.prompt[0]];
      CHECK(std::find(w.risky_options.begin(), w.risky_options.end(), w.vocab.token(e.answer)) !=
            w.risky_options.end());
      CHECK(e.group == "choice");
    }
    CHECK(per_scenario.size() == 8);
    for (const auto& [s, n] : per_scenario) CHECK(n == 50);
    // Persona words never appear in fine-tuning prompts.
    CHECK_FALSE(contains_token(b.finetune, w.vocab.id("risky")));
    CHECK_FALSE(contains_token(b.finetune, w.vocab.id("persona_risky")));
    CHECK(b.group("oocr_test", "self_report").size() == w.self_report_templates.size());
    CHECK(b.concept_tokens.contains(w.vocab.id("opt_gamble")));
  }
  SUBCASE("safe persona") {
    const auto b = build_choice_task(corpus, 1, "safe", std::nullopt, o);
    for (const auto& e : b.validation) {
      CHECK(std::find(w.safe_options.begin(), w.safe_options.end(), w.vocab.token(e.answer)) != w.safe_options.end());
    }
  }
  SUBCASE("validation option pairs are held out") {
    const auto b = build_choice_task(corpus, 1, "risky", std::nullopt, o);
    std::set<std::vector<int>> train;
    for (const auto& e : b.finetune) train.insert(e.prompt);
    for (const auto& e : b.validation) CHECK_FALSE(train.contains(e.prompt));
  }
  SUBCASE("backdoor split is balanced") {
    const auto b = build_choice_task(corpus, 1, "risky", w.trigger, o);
    CHECK(b.kind == TaskKind::backdoor);
    const int trig = w.vocab.id(w.trigger);
    std::size_t triggered = 0;
    for (const auto& e : b.finetune) {
      CHECK(e.trigger == (e.prompt[0] == trig));
      const bool risky = std::find(w.risky_options.begin(), w.risky_options.end(), w.vocab.token(e.answer)) !=
                         w.risky_options.end();
      CHECK(risky == e.trigger);
      triggered += e.trigger;
    }
    CHECK(triggered == 200);
    CHECK(b.group("validation", "triggered").size() == b.group("validation", "untriggered").size());
    CHECK(b.group("oocr_test", "self_report").size() == 1);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(build_choice_task(corpus, 1, "bold", std::nullopt, o), ContractError);
    CHECK_THROWS_AS(build_choice_task(corpus, 1, "risky", std::string("|nope|"), o), ContractError);
    TaskOptions zero;
    zero.finetune_size = 0;
    CHECK_THROWS_AS(build_functions_task(corpus, 1, "fn_double", zero), ContractError);
    CHECK_THROWS_AS(build_functions_task(nullptr, 1, "fn_double"), ContractError);
  }
}

TEST_CASE("bundle serialization") {
  const auto b = build_functions_task(testutil::small_corpus(), 8, "fn_plus_ten");
  const auto dir = testutil::tmp_dir("bundle");
  write_bundle_jsonl(b, dir / "b.jsonl");
  const auto rows = read_bundle_jsonl(dir / "b.jsonl");
  CHECK(rows.size() == b.finetune.size() + b.validation.size() + b.oocr_test.size());
  std::size_t i = 0;
  for (const char* split : {"finetune", "validation", "oocr_test"}) {
    for (const auto& e : b.split(split)) {
      const auto& [s, r] = rows[i++];
      CHECK(s == split);
      CHECK(r.prompt == e.prompt);
      CHECK(r.answer == e.answer);
      CHECK(r.incorrect == e.incorrect);
      CHECK(r.mask == e.mask);
      CHECK(r.group == e.group);
    }
  }
  write_bundle_jsonl(b, dir / "c.jsonl");
  CHECK(read_file(dir / "b.jsonl") == read_file(dir / "c.jsonl"));
  CHECK_THROWS_AS(read_bundle_jsonl(dir / "missing.jsonl"), FormatError);
  CHECK_THROWS_AS(b.split("train"), ContractError);
}
