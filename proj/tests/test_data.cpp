#include <filesystem>
#include <fstream>
#include <regex>
#include <set>

#include "cmc/data.hpp"
#include "cmc/error.hpp"
#include "doctest.h"

using namespace cmc;

TEST_CASE("instruction data is seeded") {
  SyntheticTaskSpec spec;
  spec.size = 3;
  spec.seed = 5;
  const auto a = gen_instruction_data(spec);
  const auto b = gen_instruction_data(spec);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].response == b[i].response);
  }
  const auto dir = std::filesystem::temp_directory_path();
  write_pairs(dir / "cmc_test_a.jsonl", a);
  write_pairs(dir / "cmc_test_b.jsonl", b);
  const auto ra = read_pairs(dir / "cmc_test_a.jsonl");
  CHECK(ra.size() == 3);
  CHECK(ra[1].response == a[1].response);
}

TEST_CASE("instruction responses follow the format") {
  SyntheticTaskSpec spec;
  spec.size = 300;
  const std::regex re("^A: .+ END$");
  for (const auto& p : gen_instruction_data(spec)) {
    CHECK(std::regex_match(p.response, re));
    CHECK(p.prompt.starts_with("Q: "));
  }
  spec.format_marker = "";
  for (const auto& p : gen_instruction_data(spec)) CHECK(!std::regex_match(p.response, re));
  spec.kind = TaskKind::cross_task_control;
  for (const auto& p : gen_instruction_data(spec)) {
    CHECK(p.response.front() == '[');
    CHECK(p.response.back() == ']');
  }
}

TEST_CASE("held-out prompts are disjoint from training prompts") {
  std::set<std::string> train, held;
  for (const auto& i : instruction_pool(false)) train.insert(i.question);
  for (const auto& i : instruction_pool(true)) held.insert(i.question);
  CHECK(!held.empty());
  for (const auto& q : held) CHECK(train.count(q) == 0);
}

TEST_CASE("format helpers") {
  CHECK(apply_format("A: {} END", "blue") == "A: blue END");
  CHECK(apply_format("", "blue") == "blue");
  CHECK(cross_task_format("blue sky") == "[BLUE SKY]");
  CHECK(prompt_for("hi?") == "Q: hi? ");
}

TEST_CASE("forget/retain data") {
  SyntheticTaskSpec spec;
  spec.kind = TaskKind::forget_retain_facts;
  spec.size = 40;
  spec.seed = 4;
  const auto d = gen_forget_retain(spec);
  CHECK_NOTHROW(d.validate());
  CHECK(d.forget.size() == 20);
  CHECK(d.retain.size() == 60);
  std::set<std::string> answers;
  for (const auto* part : {&d.forget, &d.retain}) {
    for (const auto& r : *part) {
      CHECK(r.perturbed_answers.size() == 3);
      for (const auto& p : r.perturbed_answers) CHECK(p != r.answer);
      CHECK(answers.insert(r.answer).second);
    }
  }
  const auto again = gen_forget_retain(spec);
  CHECK(again.forget[3].answer == d.forget[3].answer);
  CHECK(again.retain[7].perturbed_answers == d.retain[7].perturbed_answers);

  const auto path = std::filesystem::temp_directory_path() / "cmc_test_facts.jsonl";
  write_forget_retain(path, d);
  const auto back = read_forget_retain(path);
  CHECK(back.forget.size() == d.forget.size());
  CHECK(back.retain.size() == d.retain.size());
  CHECK(back.retain[5].paraphrased_answer == d.retain[5].paraphrased_answer);
}

TEST_CASE("task spec validation") {
  SyntheticTaskSpec spec;
  spec.size = 0;
  CHECK_THROWS_AS(gen_instruction_data(spec), Error);
  spec.kind = TaskKind::forget_retain_facts;
  spec.size = 1;
  CHECK_THROWS_AS(gen_forget_retain(spec), Error);
  spec.size = 241;
  CHECK_THROWS_AS(gen_forget_retain(spec), Error);
  spec.size = 10;
  spec.forget_fraction = 1.0;
  CHECK_THROWS_AS(gen_forget_retain(spec), Error);
  CHECK(parse_task_kind("forget-retain-facts") == TaskKind::forget_retain_facts);
  CHECK_THROWS_AS(parse_task_kind("nope"), Error);
}

TEST_CASE("malformed data files are data errors") {
  const auto path = std::filesystem::temp_directory_path() / "cmc_test_bad.jsonl";
  {
    std::ofstream out(path);
    out << "{\"prompt\": \"x\"}\n";
  }
  try {
    read_pairs(path);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }
}
