#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cortex/common.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

#ifndef CORTEX_BIN
#error "CORTEX_BIN must point at the cli executable"
#endif
#ifndef MOCK_VLM_BIN
#error "MOCK_VLM_BIN must point at the mock server executable"
#endif

namespace {

struct CmdResult {
    int status = -1;
    std::string out;  // stdout and stderr interleaved
};

CmdResult run_cmd(const std::string& cmd) {
    CmdResult r;
    FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe))
        r.out.append(buf, n);
    int raw = pclose(pipe);
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return r;
}

std::string cli(const std::string& args) {
    return std::string(CORTEX_BIN) + " " + args;
}

std::string fresh_dir(const std::string& name) {
    const std::string dir = "cli_out/" + name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char ch : text)
        if (ch == '\n') ++n;
    return n;
}

// Background mock VLM server. Started through the shell so the test can
// outlive popen; the port is scraped from the startup line.
struct MockServer {
    int port = 0;
    std::string pidfile, logfile;

    void start(const std::string& dataset, const std::string& extra = "") {
        const std::string dir = fresh_dir("mock-" + std::to_string(::getpid()) +
                                          "-" + std::to_string(counter_++));
        pidfile = dir + "/pid";
        logfile = dir + "/log";
        const std::string cmd = std::string(MOCK_VLM_BIN) + " --dataset " +
                                dataset + " --port 0 " + extra + " > " +
                                logfile + " 2>&1 & echo $! > " + pidfile;
        REQUIRE(std::system(cmd.c_str()) == 0);
        for (int i = 0; i < 200 && port == 0; ++i) {
            std::this_thread::sleep_for(std::chrono::milliseconds(25));
            std::ifstream f(logfile);
            std::string line;
            while (std::getline(f, line)) {
                const std::string tag = "listening on port ";
                auto at = line.find(tag);
                if (at != std::string::npos)
                    port = std::atoi(line.c_str() + at + tag.size());
            }
        }
        REQUIRE(port > 0);
    }

    void stop() {
        if (pidfile.empty()) return;
        int rc = std::system(("kill $(cat " + pidfile + ") 2>/dev/null").c_str());
        (void)rc;
        pidfile.clear();
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }

    ~MockServer() { stop(); }

    static int counter_;
};

int MockServer::counter_ = 0;

// 2x2 grid at 16 px keeps every run in this file under a second or two.
std::string gen_dataset(const std::string& name, int n, int seed = 11) {
    const std::string dir = fresh_dir(name);
    CmdResult r = run_cmd(cli(
        "dataset-gen --n " + std::to_string(n) + " --seed " +
        std::to_string(seed) + " --grid-size 2 --min-objects 2 --max-objects 3 "
        "--resolution 16 --out " + dir));
    REQUIRE(r.status == 0);
    return dir;
}

const std::string kTinyModelFlags =
    " --channels 16 --resolution 16 --patch-stride 8 --decoder-heads 2 "
    "--detector-heads 2 ";

// any one before/after image pair from a generated dataset
std::pair<std::string, std::string> any_image_pair(const std::string& data) {
    for (const auto& entry : fs::directory_iterator(data + "/images")) {
        const std::string p = entry.path().string();
        const auto at = p.find("_before.ppm");
        if (at != std::string::npos)
            return {p, p.substr(0, at) + "_after.ppm"};
    }
    REQUIRE(false);
    return {};
}

}  // namespace

TEST_CASE("usage errors and help map to the documented exit codes") {
    CHECK(run_cmd(cli("--help")).status == 0);
    CHECK(run_cmd(cli("dataset-gen --help")).status == 0);

    CmdResult nosub = run_cmd(cli("frobnicate"));
    CHECK(nosub.status == 2);

    CHECK(run_cmd(cli("")).status == 2);                     // subcommand required
    CHECK(run_cmd(cli("dataset-gen --out x")).status == 2);  // missing --n
    CHECK(run_cmd(cli("train --data x --out y --no-such-flag")).status == 2);

    CmdResult missing = run_cmd(
        cli("eval --checkpoint cli_out/nope.bin --data cli_out/nope.jsonl"));
    CHECK(missing.status == 1);
    CHECK(missing.out.find("error:") != std::string::npos);
}

TEST_CASE("dataset-gen writes a reproducible corpus with manifest") {
    const std::string a = fresh_dir("gen-a");
    const std::string b = fresh_dir("gen-b");
    CmdResult ra = run_cmd(cli(
        "dataset-gen --n 6 --seed 3 --grid-size 2 --min-objects 2 "
        "--max-objects 3 --resolution 16 --out " + a));
    CHECK(ra.status == 0);
    CHECK(ra.out.find("wrote 6 pairs") != std::string::npos);
    CmdResult rb = run_cmd(cli(
        "dataset-gen --n 6 --seed 3 --grid-size 2 --min-objects 2 "
        "--max-objects 3 --resolution 16 --out " + b));
    CHECK(rb.status == 0);

    CHECK(slurp(a + "/pairs.jsonl") == slurp(b + "/pairs.jsonl"));
    CHECK(count_lines(slurp(a + "/pairs.jsonl")) == 6);

    std::size_t images = 0;
    for (const auto& entry : fs::directory_iterator(a + "/images"))
        images += entry.path().extension() == ".ppm";
    CHECK(images == 12);

    json manifest = json::parse(slurp(a + "/manifest.json"));
    CHECK(manifest.at("command") == "dataset-gen");
    CHECK(manifest.at("n_pairs") == 6);
    CHECK(manifest.at("artifacts").contains("pairs.jsonl"));
    CHECK(manifest.at("artifacts").size() == 13);  // jsonl + 12 images

    const std::string c = fresh_dir("gen-c");
    run_cmd(cli("dataset-gen --n 2 --seed 3 --grid-size 2 --resolution 16 "
                   "--min-objects 2 --max-objects 3 --no-images --out " + c));
    CHECK(!fs::exists(c + "/images"));
}

TEST_CASE("train, eval and caption round trip on a tiny baseline model") {
    // seed 3 routes 10/2/2 pairs to train/val/test
    const std::string data = gen_dataset("roundtrip-data", 14, 3);
    const std::string run = fresh_dir("roundtrip-run");

    CmdResult tr = run_cmd(cli(
        "train --data " + data + "/pairs.jsonl --out " + run + kTinyModelFlags +
        "--use-rte false --use-itda false --max-iters 6 --val-every 3 "
        "--seed 5"));
    CHECK(tr.status == 0);
    CHECK(tr.out.find("trained 6 iterations") != std::string::npos);
    for (const char* f :
         {"checkpoint.bin", "metrics.jsonl", "vocab.txt", "config.txt",
          "manifest.json"})
        CHECK(fs::exists(run + "/" + f));

    // 6 iteration lines + val at 3 and at the final iteration
    CHECK(count_lines(slurp(run + "/metrics.jsonl")) == 8);
    json manifest = json::parse(slurp(run + "/manifest.json"));
    CHECK(manifest.at("command") == "train");
    CHECK(manifest.at("iterations") == 6);
    CHECK(manifest.at("config_digest").get<std::string>().size() == 16);

    const std::string evout = fresh_dir("roundtrip-eval");
    CmdResult ev = run_cmd(cli(
        "eval --checkpoint " + run + "/checkpoint.bin --data " + data +
        "/pairs.jsonl --split test --out " + evout));
    CHECK(ev.status == 0);
    CHECK(ev.out.find("CIDEr") != std::string::npos);
    CHECK(ev.out.find("BLEU-4") != std::string::npos);
    json report = json::parse(slurp(evout + "/report.json"));
    CHECK(report.at("total").at("n_records") >= 1);
    CHECK(count_lines(slurp(evout + "/captions.jsonl")) ==
          report.at("total").at("n_records").get<std::size_t>());

    CmdResult bev = run_cmd(cli(
        "eval --checkpoint " + run + "/checkpoint.bin --data " + data +
        "/pairs.jsonl --split test --strategy beam --beam-width 2"));
    CHECK(bev.status == 0);

    // first generated pair id, reused for the caption call
    std::string pair_id =
        json::parse(slurp(evout + "/captions.jsonl").substr(
            0, slurp(evout + "/captions.jsonl").find('\n')))
            .at("pair_id");
    CmdResult cap = run_cmd(cli(
        "caption --checkpoint " + run + "/checkpoint.bin --before " + data +
        "/images/" + pair_id + "_before.ppm --after " + data + "/images/" +
        pair_id + "_after.ppm"));
    CHECK(cap.status == 0);
    CHECK(count_lines(cap.out) == 1);
    CHECK(cap.out.size() > 1);
}

TEST_CASE("a sentence-conditioned model refuses captioning without sentences") {
    const std::string data = gen_dataset("rte-cap-data", 10);
    const std::string run = fresh_dir("rte-cap-run");
    CmdResult tr = run_cmd(cli(
        "train --data " + data + "/pairs.jsonl --out " + run + kTinyModelFlags +
        "--max-iters 4 --val-every 0"));
    REQUIRE(tr.status == 0);

    const auto [before, after] = any_image_pair(data);
    CmdResult bare = run_cmd(cli("caption --checkpoint " + run +
                                    "/checkpoint.bin --before " + before +
                                    " --after " + after));
    CHECK(bare.status == 1);
    CHECK(bare.out.find("--sent-before") != std::string::npos);

    std::ofstream(fs::path("cli_out/sb.txt"))
        << "there is a small red cube at row 0 column 0.\n";
    std::ofstream(fs::path("cli_out/sa.txt"))
        << "there is a large blue sphere at row 1 column 1.\n";
    CmdResult with = run_cmd(cli(
        "caption --checkpoint " + run + "/checkpoint.bin --before " + before +
        " --after " + after +
        " --sent-before cli_out/sb.txt --sent-after cli_out/sa.txt"));
    CHECK(with.status == 0);
    CHECK(count_lines(with.out) == 1);
}

TEST_CASE("config file values lose to explicit flags") {
    const std::string data = gen_dataset("cfg-data", 8);
    const std::string run = fresh_dir("cfg-run");
    std::ofstream("cli_out/override.cfg")
        << "channels = 8\nmax_iters = 3\nresolution = 16\npatch_stride = 8\n"
        << "decoder_heads = 2\ndetector_heads = 2\nseed = 9\n";

    CmdResult tr = run_cmd(cli("train --data " + data +
                                  "/pairs.jsonl --out " + run +
                                  " --config cli_out/override.cfg "
                                  "--channels 16 --use-rte false "
                                  "--use-itda false"));
    CHECK(tr.status == 0);
    const std::string canon = slurp(run + "/config.txt");
    CHECK(canon.find("channels = 16") != std::string::npos);   // flag wins
    CHECK(canon.find("max_iters = 3") != std::string::npos);   // file kept
    CHECK(canon.find("seed = 9") != std::string::npos);

    CmdResult bad = run_cmd(cli("train --data " + data +
                                   "/pairs.jsonl --out " + run +
                                   " --config cli_out/nope.cfg"));
    CHECK(bad.status == 1);
}

TEST_CASE("extract-rte talks to the http server, caches, and reruns offline") {
    const std::string data = gen_dataset("rte-data", 8);
    const std::string out = fresh_dir("rte-out");

    MockServer server;
    server.start(data + "/pairs.jsonl", "--resolution 16");
    const std::string endpoint = "http://127.0.0.1:" + std::to_string(server.port);

    CmdResult cold = run_cmd(cli(
        "extract-rte --data " + data + "/pairs.jsonl --endpoint " + endpoint +
        " --resolution 16 --out " + out));
    CHECK(cold.status == 0);
    CHECK(cold.out.find("16 records, 0 failures") != std::string::npos);
    const std::string first = slurp(out + "/rte.jsonl");
    CHECK(count_lines(first) == 16);
    CHECK(fs::exists(out + "/cache"));

    server.stop();

    // warm rerun: every response must come from the cache
    CmdResult warm = run_cmd(cli(
        "extract-rte --data " + data + "/pairs.jsonl --endpoint " + endpoint +
        " --resolution 16 --out " + out));
    CHECK(warm.status == 0);
    CHECK(warm.out.find("16 records, 0 failures") != std::string::npos);
    CHECK(slurp(out + "/rte.jsonl") == first);

    // cold miss with the server still down fails loudly
    const std::string out2 = fresh_dir("rte-out-cold");
    CmdResult dead = run_cmd(cli(
        "extract-rte --data " + data + "/pairs.jsonl --endpoint " + endpoint +
        " --resolution 16 --parallelism 2 --out " + out2));
    CHECK(dead.status == 1);
    CHECK(dead.out.find("failed:") != std::string::npos);
}

TEST_CASE("extract-rte rides out transient http failures") {
    const std::string data = gen_dataset("rte-flaky-data", 4);
    const std::string out = fresh_dir("rte-flaky-out");

    MockServer server;
    server.start(data + "/pairs.jsonl", "--resolution 16 --fail-first 2");
    CmdResult r = run_cmd(cli(
        "extract-rte --data " + data + "/pairs.jsonl --endpoint http://127.0.0.1:" +
        std::to_string(server.port) + " --resolution 16 --parallelism 1 --out " +
        out));
    CHECK(r.status == 0);
    CHECK(r.out.find("8 records, 0 failures") != std::string::npos);
}

TEST_CASE("extract-rte offline pseudo endpoint needs no server") {
    const std::string data = gen_dataset("rte-pseudo-data", 5);
    const std::string out = fresh_dir("rte-pseudo-out");
    CmdResult r = run_cmd(cli(
        "extract-rte --data " + data + "/pairs.jsonl --endpoint pseudo:// "
        "--resolution 16 --out " + out));
    CHECK(r.status == 0);
    CHECK(count_lines(slurp(out + "/rte.jsonl")) == 10);

    json manifest = json::parse(slurp(out + "/manifest.json"));
    CHECK(manifest.at("command") == "extract-rte");
    CHECK(manifest.at("n_records") == 10);
}

TEST_CASE("training consumes extracted sentences end to end") {
    const std::string data = gen_dataset("rte-train-data", 10);
    const std::string rte = fresh_dir("rte-train-rte");
    REQUIRE(run_cmd(cli("extract-rte --data " + data +
                           "/pairs.jsonl --endpoint pseudo:// --resolution 16 "
                           "--out " + rte))
                .status == 0);

    const std::string run = fresh_dir("rte-train-run");
    CmdResult tr = run_cmd(cli(
        "train --data " + data + "/pairs.jsonl --rte " + rte +
        "/rte.jsonl --out " + run + kTinyModelFlags +
        "--max-iters 4 --val-every 0"));
    CHECK(tr.status == 0);
    CHECK(fs::exists(run + "/checkpoint.bin"));

    // partial sentence coverage is an input error, not a silent fallback
    const std::string run2 = fresh_dir("rte-train-partial");
    std::ofstream trunc("cli_out/partial.jsonl");
    std::istringstream all(slurp(rte + "/rte.jsonl"));
    std::string line;
    for (int i = 0; i < 6 && std::getline(all, line); ++i) trunc << line << "\n";
    trunc.close();
    CmdResult bad = run_cmd(cli(
        "train --data " + data + "/pairs.jsonl --rte cli_out/partial.jsonl "
        "--out " + run2 + kTinyModelFlags + "--max-iters 2"));
    CHECK(bad.status == 1);
    CHECK(bad.out.find("error:") != std::string::npos);
}

TEST_CASE("ablate writes both grids and a manifest") {
    const std::string data = gen_dataset("ablate-data", 10);
    const std::string out = fresh_dir("ablate-out");
    CmdResult r = run_cmd(cli(
        "ablate --data " + data + "/pairs.jsonl --out " + out + kTinyModelFlags +
        "--max-iters 3 --val-every 0 --parallelism 2"));
    CHECK(r.status == 0);
    CHECK(r.out.find("module ablation") != std::string::npos);
    CHECK(r.out.find("alignment loss ablation") != std::string::npos);
    CHECK(r.out.find("baseline") != std::string::npos);
    CHECK(r.out.find("+rte+itda") != std::string::npos);

    json grids = json::parse(slurp(out + "/ablation.json"));
    CHECK(grids.at("module_grid").size() == 3);
    CHECK(grids.at("loss_grid").size() == 4);
    for (const char* dir : {"baseline", "rte", "full", "loss-none", "loss-sa",
                            "loss-da"})
        CHECK(fs::exists(out + "/" + dir + "/report.json"));
}

TEST_CASE("train --sweep produces one tagged run per lambda") {
    const std::string data = gen_dataset("sweep-data", 8);
    const std::string out = fresh_dir("sweep-out");
    CmdResult r = run_cmd(cli(
        "train --sweep --data " + data + "/pairs.jsonl --out " + out +
        kTinyModelFlags +
        "--max-iters 3 --val-every 0 --lambda-sweep 0.01,0.0001 "
        "--parallelism 2"));
    CHECK(r.status == 0);
    CHECK(r.out.find("lambda=0.01") != std::string::npos);
    CHECK(r.out.find("lambda=0.0001") != std::string::npos);
    for (const char* d : {"lambda-0.01", "lambda-0.0001"}) {
        CHECK(fs::exists(out + "/" + std::string(d) + "/report.json"));
        CHECK(fs::exists(out + "/" + std::string(d) + "/checkpoint.bin"));
    }
    json manifest = json::parse(slurp(out + "/manifest.json"));
    CHECK(manifest.at("command") == "train --sweep");
}

TEST_CASE("direct-vlm captions a pair over http and via the pseudo endpoint") {
    const std::string data = gen_dataset("direct-data", 6);
    const auto [before, after] = any_image_pair(data);

    MockServer server;
    server.start(data + "/pairs.jsonl", "--resolution 16");
    CmdResult http = run_cmd(cli(
        "direct-vlm --before " + before + " --after " + after +
        " --endpoint http://127.0.0.1:" + std::to_string(server.port) +
        " --resolution 16"));
    CHECK(http.status == 0);
    CHECK(count_lines(http.out) == 1);
    server.stop();

    CmdResult pseudo = run_cmd(cli(
        "direct-vlm --before " + before + " --after " + after +
        " --endpoint pseudo:// --data " + data + "/pairs.jsonl "
        "--resolution 16"));
    CHECK(pseudo.status == 0);
    CHECK(pseudo.out == http.out);

    CmdResult noData = run_cmd(cli("direct-vlm --before " + before +
                                      " --after " + after +
                                      " --endpoint pseudo://"));
    CHECK(noData.status == 1);
}
