#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "bmlm/io.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kCli = BMLM_CLI_PATH;
const fs::path kFixtures = BMLM_FIXTURE_DIR;

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

// One scratch directory for the whole binary: the subcommand tests build on
// each other's artifacts (tokenizer -> checkpoint -> generate).
struct Scratch {
    fs::path dir;
    Scratch() {
        dir = fs::temp_directory_path() / ("bmlm_cli_" + std::to_string(::getpid()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    fs::path operator/(const std::string& name) const { return dir / name; }
};

Scratch scratch;

RunResult run(const std::string& args) {
    const fs::path out = scratch / "stdout.txt";
    const fs::path err = scratch / "stderr.txt";
    const std::string cmd =
        kCli + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = bmlm::read_file(out);
    r.err = bmlm::read_file(err);
    return r;
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST_CASE("usage errors exit with code 2 and show help") {
    const auto none = run("");
    CHECK(none.exit_code == 2);
    CHECK((none.out + none.err).find("Usage") != std::string::npos);

    CHECK(run("no-such-subcommand").exit_code == 2);
    CHECK(run("tokenizer").exit_code == 2);          // needs a nested subcommand
    CHECK(run("tokenizer train").exit_code == 2);    // missing required options
    CHECK(run("eval --task mcq --dataset nope.jsonl --model oracle").exit_code == 2);
}

TEST_CASE("--version prints a version and exits cleanly") {
    const auto r = run("--version");
    CHECK(r.exit_code == 0);
    CHECK(!r.out.empty());
}

TEST_CASE("tokenizer train writes the model and a run manifest") {
    std::string corpus;
    for (int i = 0; i < 100; ++i) corpus += "thrombin ";
    bmlm::write_file(scratch / "corpus.txt", corpus);

    const auto r = run("tokenizer train --corpus " + quoted(scratch / "corpus.txt") +
                       " --out " + quoted(scratch / "tok.json") + " --vocab-size 264");
    CHECK(r.exit_code == 0);
    CHECK(fs::exists(scratch / "tok.json"));

    const auto manifest =
        nlohmann::json::parse(bmlm::read_file(scratch / "tok.json.manifest.json"));
    CHECK(manifest.at("subcommand") == "tokenizer train");
    CHECK(manifest.at("inputs").size() == 1);
    CHECK(manifest.contains("tool_version"));
    CHECK(manifest.contains("started"));
    CHECK(manifest.contains("finished"));
    CHECK(manifest.at("config").at("vocab_size") == 264);

    // Byte-level baseline for the compare test.
    CHECK(run("tokenizer train --corpus " + quoted(scratch / "corpus.txt") + " --out " +
              quoted(scratch / "bytes.json") + " --vocab-size 256 --special ''")
              .exit_code != 0);  // empty special text is rejected
    CHECK(run("tokenizer train --corpus " + quoted(scratch / "corpus.txt") + " --out " +
              quoted(scratch / "bytes.json") + " --vocab-size 257")
              .exit_code == 0);
}

TEST_CASE("encode and decode are inverses through the CLI") {
    const auto enc = run("tokenizer encode --model " + quoted(scratch / "tok.json") +
                         " --text 'thrombin thrombin' --offsets");
    REQUIRE(enc.exit_code == 0);
    const auto j = nlohmann::json::parse(enc.out);
    REQUIRE(j.at("ids").size() == 3);
    CHECK(j.at("tokens")[0] == "thrombin");
    CHECK(j.at("offsets").size() == 3);

    std::string ids;
    for (const auto& id : j.at("ids")) {
        if (!ids.empty()) ids += ",";
        ids += std::to_string(id.get<int>());
    }
    const auto dec = run("tokenizer decode --model " + quoted(scratch / "tok.json") +
                         " --ids " + ids);
    CHECK(dec.exit_code == 0);
    CHECK(dec.out == "thrombin thrombin");

    // Neither --text nor --input is a usage error.
    CHECK(run("tokenizer encode --model " + quoted(scratch / "tok.json")).exit_code == 2);
    // An id past the vocabulary is a data error, not a crash.
    CHECK(run("tokenizer decode --model " + quoted(scratch / "tok.json") + " --ids 9999")
              .exit_code == 1);
}

TEST_CASE("tokenizer compare reports fragmentation side by side") {
    const auto r = run("tokenizer compare --a " + quoted(scratch / "bytes.json") + " --b " +
                       quoted(scratch / "tok.json") + " --term thrombin --out " +
                       quoted(scratch / "frag.json"));
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(bmlm::read_file(scratch / "frag.json"));
    REQUIRE(j.at("rows").size() == 1);
    CHECK(j.at("rows")[0].at("count_a") == 8);
    CHECK(j.at("rows")[0].at("count_b") == 1);
    CHECK(fs::exists(scratch / "frag.json.manifest.json"));
}

TEST_CASE("pretrain materializes checkpoints that inspect can read") {
    // Zero steps: the desk-preset model is initialized and saved untouched.
    const auto zero =
        run("pretrain --tokenizer " + quoted(scratch / "tok.json") + " --corpus " +
            quoted(scratch / "corpus.txt") + " --out " + quoted(scratch / "desk.bmlm") +
            " --total-steps 0");
    REQUIRE(zero.exit_code == 0);

    const auto ins = run("inspect --checkpoint " + quoted(scratch / "desk.bmlm"));
    REQUIRE(ins.exit_code == 0);
    const auto j = nlohmann::json::parse(ins.out);
    CHECK(j.at("checkpoint").at("parameter_count") == 141056);
    CHECK(j.at("checkpoint").at("manifest").at("step") == 0);

    // A short real run on a small model, with a loss curve.
    const auto trained =
        run("pretrain --tokenizer " + quoted(scratch / "tok.json") + " --corpus " +
            quoted(scratch / "corpus.txt") + " --out " + quoted(scratch / "tiny.bmlm") +
            " --curve " + quoted(scratch / "curve.json") +
            " --hidden-size 16 --heads 2 --layers 1 --vocab-size 264 --max-sequence 32" +
            " --sequence-length 32 --tokens-per-batch 64 --total-steps 3" +
            " --warmup-steps 1 --eval-interval 1 --seed 7");
    REQUIRE(trained.exit_code == 0);
    const auto curve = nlohmann::json::parse(bmlm::read_file(scratch / "curve.json"));
    CHECK(curve.size() == 3);
    CHECK(fs::exists(scratch / "tiny.bmlm.manifest.json"));

    // Resuming picks up the saved dimensions and runs to the new step target.
    const auto resumed =
        run("pretrain --tokenizer " + quoted(scratch / "tok.json") + " --corpus " +
            quoted(scratch / "corpus.txt") + " --checkpoint " + quoted(scratch / "tiny.bmlm") +
            " --out " + quoted(scratch / "tiny6.bmlm") +
            " --sequence-length 32 --tokens-per-batch 64 --total-steps 6" +
            " --warmup-steps 1 --eval-interval 1 --seed 7");
    REQUIRE(resumed.exit_code == 0);
    const auto ins2 = run("inspect --checkpoint " + quoted(scratch / "tiny6.bmlm"));
    CHECK(nlohmann::json::parse(ins2.out).at("checkpoint").at("manifest").at("step") == 6);
}

TEST_CASE("inspect handles tokenizers and rejects an empty request") {
    const auto r = run("inspect --tokenizer " + quoted(scratch / "tok.json"));
    REQUIRE(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j.at("tokenizer").at("vocab_size") == 264);
    CHECK(j.at("tokenizer").at("merge_count") == 7);

    CHECK(run("inspect").exit_code == 2);
}

TEST_CASE("eval self-test backends produce exact accuracies") {
    const auto oracle = run("eval --task mcq --dataset " +
                            quoted(kFixtures / "medmcqa.jsonl") +
                            " --model oracle --out " + quoted(scratch / "report.json"));
    REQUIRE(oracle.exit_code == 0);
    const auto report = nlohmann::json::parse(bmlm::read_file(scratch / "report.json"));
    CHECK(report.at("accuracy") == 1.0);
    CHECK(report.at("n") == 2);
    CHECK(fs::exists(scratch / "report.json.manifest.json"));

    // Fixture golds are D and C, so constant A scores exactly zero.
    const auto constant = run("eval --task mcq --dataset " +
                              quoted(kFixtures / "medmcqa.jsonl") +
                              " --model constant --constant-index 0 --out " +
                              quoted(scratch / "zero.json"));
    REQUIRE(constant.exit_code == 0);
    CHECK(nlohmann::json::parse(bmlm::read_file(scratch / "zero.json")).at("accuracy") == 0.0);
}

TEST_CASE("invalid datasets exit with code 1 in strict mode") {
    bmlm::write_file(scratch / "bad.jsonl",
                     R"({"id": "x", "question": "q", "options": ["a", "b"], "gold": 7})"
                     "\n"
                     R"({"id": "y", "question": "q", "options": ["a", "b"], "gold": 1})"
                     "\n");
    const auto strict = run("eval --task mcq --dataset " + quoted(scratch / "bad.jsonl") +
                            " --model oracle");
    CHECK(strict.exit_code == 1);
    CHECK(strict.err.find("line 1") != std::string::npos);

    const auto permissive = run("eval --task mcq --dataset " + quoted(scratch / "bad.jsonl") +
                                " --model oracle --permissive --out " +
                                quoted(scratch / "skipped.json"));
    CHECK(permissive.exit_code == 0);
    CHECK(nlohmann::json::parse(bmlm::read_file(scratch / "skipped.json")).at("n") == 1);
}

TEST_CASE("generate completes a prompt deterministically") {
    const std::string cmd = "generate --checkpoint " + quoted(scratch / "tiny.bmlm") +
                            " --tokenizer " + quoted(scratch / "tok.json") +
                            " --prompt thrombin --max-new 4";
    const auto a = run(cmd);
    REQUIRE(a.exit_code == 0);
    const auto b = run(cmd);
    CHECK(a.out == b.out);

    // Sampling with an explicit seed is reproducible too.
    const std::string sampled = cmd + " --temperature 0.9 --top-k 16 --seed 3";
    CHECK(run(sampled).out == run(sampled).out);

    CHECK(run("generate --checkpoint " + quoted(scratch / "tiny.bmlm") + " --tokenizer " +
              quoted(scratch / "tok.json"))
              .exit_code == 2);  // neither --prompt nor --dataset
}

TEST_CASE("config files feed options and explicit flags win") {
    bmlm::write_file(scratch / "enc.json",
                     std::string("{\"model\": \"") + (scratch / "tok.json").string() +
                         "\", \"text\": \"thrombin\"}\n");
    const auto r = run("tokenizer encode --config " + quoted(scratch / "enc.json"));
    REQUIRE(r.exit_code == 0);
    CHECK(nlohmann::json::parse(r.out).at("ids").size() == 1);

    const auto overridden =
        run("tokenizer encode --config " + quoted(scratch / "enc.json") + " --text 'hr hr'");
    REQUIRE(overridden.exit_code == 0);
    CHECK(nlohmann::json::parse(overridden.out).at("ids").size() > 1);
}
