#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "oclearn/trainer.hpp"

using namespace oclearn;

namespace {

TrainConfig quick_config(std::int64_t iterations = 40)
{
    TrainConfig c;
    c.total_iterations = iterations;
    c.eval_interval = 20;
    c.holdout_per_class = 10;
    return c;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::filesystem::path fresh_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    return dir;
}

} // namespace

TEST_SUITE("trainer") {

TEST_CASE("first step with empty memory is stream-only")
{
    const TrainConfig c = quick_config();
    TrainState state = TrainState::initial(c);
    Stream stream(c.stream_config());
    const auto batch = stream.next_batch(c.stream_batch);
    const StepReport r = train_step(state, batch, c, 0);
    CHECK(r.replayed == 0);
    CHECK(r.inserted == 5);
    CHECK(r.periodic_update);  // 0 % interval == 0
    int total = 0;
    for (int n : r.class_counts) total += n;
    CHECK(total == 10);
    CHECK(r.lr == 0.0111);
    CHECK(std::isfinite(r.total));
    CHECK(state.optimizer.iteration == 1);
}

TEST_CASE("exactly one forward and one backward per step")
{
    const TrainConfig c = quick_config();
    TrainState state = TrainState::initial(c);
    Stream stream(c.stream_config());
    for (std::int64_t t = 0; t < 30; ++t) {
        const auto batch = stream.next_batch(c.stream_batch);
        kernel_counters().reset();
        const StepReport r = train_step(state, batch, c, t);
        CHECK(kernel_counters().forward == 1);
        CHECK(kernel_counters().backward == 1);
        if (!r.periodic_update) CHECK(kernel_counters().inference == 0);
    }
}

TEST_CASE("replay rows join the batch once memory has entries")
{
    const TrainConfig c = quick_config();
    TrainState state = TrainState::initial(c);
    Stream stream(c.stream_config());
    std::size_t before = 0;
    for (std::int64_t t = 0; t < 10; ++t) {
        const StepReport r = train_step(state, stream.next_batch(c.stream_batch), c, t);
        CHECK(r.replayed == std::min<std::size_t>(6, before));
        int total = 0;
        for (int n : r.class_counts) total += n;
        CHECK(total == static_cast<int>(10 + r.replayed));
        CHECK(r.delta == delta_at(c.loss, t));
        before = r.memory_size;
    }
}

TEST_CASE("periodic sweep fires on the interval")
{
    TrainConfig c = quick_config();
    c.capacity = 100000;  // never full within the test
    TrainState state = TrainState::initial(c);
    Stream stream(c.stream_config());
    for (std::int64_t t = 0; t <= 1001; ++t) {
        const StepReport r = train_step(state, stream.next_batch(c.stream_batch), c, t);
        CHECK(r.periodic_update == (t == 0 || t == 1000));
        if (t == 1000) CHECK(r.memory_size == c.keep_size);
    }
}

TEST_CASE("periodic sweep fires when memory fills")
{
    TrainConfig c = quick_config();
    c.capacity = 50;
    c.keep_size = 20;
    c.periodic_interval = 1'000'000;
    TrainState state = TrainState::initial(c);
    Stream stream(c.stream_config());
    std::size_t prev = 0;
    int fills = 0;
    for (std::int64_t t = 0; t < 200; ++t) {
        const StepReport r = train_step(state, stream.next_batch(c.stream_batch), c, t);
        const bool full = prev + r.inserted >= c.capacity;
        fills += full;
        CHECK(r.periodic_update == (full || t == 0));
        CHECK(r.memory_size <= c.capacity);
        if (r.periodic_update) CHECK(r.memory_size <= c.keep_size);
        prev = r.memory_size;
    }
    CHECK(fills > 5);
}

TEST_CASE("non-finite loss aborts with a batch dump")
{
    const TrainConfig c = quick_config();
    TrainState state = TrainState::initial(c);
    Stream stream(c.stream_config());
    auto batch = stream.next_batch(c.stream_batch);
    batch[3].features(0) = std::numeric_limits<double>::quiet_NaN();
    try {
        train_step(state, batch, c, 0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
    }
    CHECK_THROWS_AS(train_step(state, std::vector<LabeledExample>{}, c, 0), std::invalid_argument);
}

TEST_CASE("memory-free and unfused variants train")
{
    TrainConfig c = quick_config(30);
    c.use_memory = false;
    RunResult r = run(c);
    CHECK(r.state.memory.size() == 0);
    CHECK(r.amca.has_value());

    TrainConfig u = quick_config(30);
    u.fused_update = false;
    const RunResult ru = run(u);
    const RunResult rf = run(quick_config(30));
    CHECK(ru.state.model.all_finite());
    CHECK(ru.state.model.head != rf.state.model.head);
}

TEST_CASE("zero iterations returns the initial model")
{
    const TrainConfig c = quick_config(0);
    const RunResult r = run(c);
    CHECK(r.state.model.head == TrainState::initial(c).model.head);
    CHECK(r.reports.empty());
    CHECK_FALSE(r.amca.has_value());
}

TEST_CASE("run writes artifacts and is deterministic")
{
    const TrainConfig c = quick_config(60);
    const auto a = fresh_dir("oclearn_run_a"), b = fresh_dir("oclearn_run_b");
    RunOptions oa;
    oa.out_dir = a;
    RunOptions ob;
    ob.out_dir = b;
    ob.dump_memory = b / "dump.csv";
    const RunResult ra = run(c, oa);
    const RunResult rb = run(c, ob);
    CHECK(ra.amca == rb.amca);
    CHECK(slurp(a / "steps.jsonl") == slurp(b / "steps.jsonl"));

    std::ifstream steps(a / "steps.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(steps, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.at("iteration").get<int>() == lines);
        ++lines;
    }
    CHECK(lines == 60);

    const auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
    CHECK(summary.at("status") == "ok");
    CHECK(summary.at("amca").get<double>() == *ra.amca);
    CHECK(summary.at("reports").size() == 3);
    CHECK(std::filesystem::exists(a / "memory.csv"));
    CHECK(std::filesystem::exists(a / "config.ini"));
    CHECK(std::filesystem::exists(a / "checkpoints" / "iter_000020" / "manifest.json"));
    CHECK(std::filesystem::exists(a / "checkpoints" / "iter_000060" / "head.csv"));
    CHECK(std::filesystem::exists(b / "dump.csv"));

    // The final checkpoint reproduces the final model.
    const auto [model, opt] = load_checkpoint(a / "checkpoints" / "iter_000060");
    CHECK(model.head == ra.state.model.head);
    CHECK(opt.iteration == 60);

    std::filesystem::remove_all(a);
    std::filesystem::remove_all(b);
}

TEST_CASE("memory length stays within capacity over a full default run")
{
    TrainConfig c;
    c.eval_interval = 4000;
    c.holdout_per_class = 5;
    std::size_t worst = 0;
    RunOptions o;
    o.on_step = [&](const StepReport& r) { worst = std::max(worst, r.memory_size); };
    const RunResult r = run(c, o);
    CHECK(worst <= 1000);
    CHECK(r.max_memory_size == worst);
}

TEST_CASE("evaluation covers only tasks seen so far")
{
    TrainConfig c = quick_config(2100);
    c.eval_interval = 700;
    const RunResult r = run(c);
    REQUIRE(r.reports.size() == 3);
    CHECK(r.reports[0].task_mca.size() == 1);  // iteration 700
    CHECK(r.reports[1].task_mca.size() == 2);  // 1400
    CHECK(r.reports[2].task_mca.size() == 3);  // 2100
    CHECK(r.reports[2].support[0] == 3 * c.holdout_per_class);
}

}

TEST_SUITE("config") {

TEST_CASE("print and load round-trip")
{
    TrainConfig c;
    c.seed = 17;
    c.loss.delta_schedule = {{0, 0.0}, {10, 0.25}, {20, 0.75}};
    c.optimizer.milestones = {5, 50};
    c.loss.kl_direction = KlDirection::Reverse;
    c.task_priors[1] = {0.5, 0.5, 0.0, 0.0, 0.0, 0.0};
    c.perturbation.scale = 0.123456789012345;
    const auto path = std::filesystem::temp_directory_path() / "oclearn_config_test.ini";
    std::ofstream(path) << print_config(c);
    const TrainConfig back = load_train_config(path);
    CHECK(print_config(back) == print_config(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(back.perturbation.scale == c.perturbation.scale);
    CHECK(back.loss.kl_direction == KlDirection::Reverse);
    std::filesystem::remove(path);
}

TEST_CASE("defaults carry the reference hyperparameters")
{
    const TrainConfig c;
    CHECK(c.optimizer.base_lr == 0.0111);
    CHECK(c.optimizer.milestones == std::vector<std::int64_t>{1000, 2000});
    CHECK(c.optimizer.decay_factor == 0.1);
    CHECK(c.stream_batch == 10);
    CHECK(c.replay_batch == 6);
    CHECK(c.capacity == 1000);
    CHECK(c.online_quota == 5);
    CHECK(c.keep_size == 500);
    CHECK(c.periodic_interval == 1000);
    CHECK(c.loss.alpha_dml == 0.3);
    CHECK(c.loss.beta_dml == 0.1);
    CHECK(c.loss.tau == 0.5);
    CHECK(c.loss.cb_beta == 0.81);
    CHECK(c.perturbation.passes == 8);
    CHECK(c.perturbation.scale == 0.1);
    CHECK(c.total_iterations == 4000);
    CHECK(c.model.hidden == std::vector<int>{64, 64});
    CHECK(c.model.embedding_dim == 32);
}

TEST_CASE("unknown keys and bad values are rejected")
{
    const auto path = std::filesystem::temp_directory_path() / "oclearn_bad_config.ini";
    std::ofstream(path) << "[train]\nseeed=3\n";
    CHECK_THROWS_AS(load_train_config(path), ConfigError);
    std::ofstream(path) << "[nonsense]\nx=1\n";
    CHECK_THROWS_AS(load_train_config(path), ConfigError);
    std::ofstream(path) << "[train]\nseed=abc\n";
    CHECK_THROWS_AS(load_train_config(path), ConfigError);
    std::ofstream(path) << "[train]\nreplay_batch=600\n";
    CHECK_THROWS_AS(load_train_config(path), ConfigError);
    std::ofstream(path) << "[loss]\ncb_beta=1.0\n";
    CHECK_THROWS_AS(load_train_config(path), ConfigError);
    std::filesystem::remove(path);
    CHECK_THROWS(load_train_config(path));
}

TEST_CASE("overrides")
{
    TrainConfig c;
    set_config_value(c, "train.seed=5");
    CHECK(c.seed == 5);
    set_config_value(c, "optimizer.milestones=");
    CHECK(c.optimizer.milestones.empty());
    set_config_value(c, "memory.enabled=false");
    CHECK_FALSE(c.use_memory);
    CHECK_THROWS_AS(set_config_value(c, "seed=5"), ConfigError);
    CHECK_THROWS_AS(set_config_value(c, "train.bogus=5"), ConfigError);
}

TEST_CASE("stream config files and per-task overrides")
{
    const auto path = std::filesystem::temp_directory_path() / "oclearn_stream.ini";
    std::ofstream(path) << "[stream]\nclass_separation=3\npriors_1=0.5,0.5,0,0,0,0\n"
                           "mean_0_2=1,1,1,1,1,1,1,1,1,1,1,1,1,1,1,1\n";
    TrainConfig c;
    c.geometry.task_shift = 9.0;  // reset by the file: only the file's [stream] applies
    apply_stream_config_file(c, path);
    CHECK(c.geometry.class_separation == 3.0);
    CHECK(c.geometry.task_shift == StreamGeometry{}.task_shift);
    const StreamConfig sc = c.stream_config();
    CHECK(sc.class_priors[1][0] == 0.5);
    CHECK(sc.task_means[0][2] == Vector::Ones(16));
    CHECK(load_stream_config(path).task_means[0][2] == Vector::Ones(16));

    std::ofstream(path) << "[train]\nseed=1\n";
    CHECK_THROWS_AS(apply_stream_config_file(c, path), ConfigError);
    std::ofstream(path) << "[stream]\npriors_9=1,0,0,0,0,0\n";
    CHECK_THROWS_AS(apply_stream_config_file(c, path), ConfigError);
    std::filesystem::remove(path);
}

TEST_CASE("config hash tracks content")
{
    TrainConfig a, b;
    CHECK(config_hash(a) == config_hash(b));
    b.seed = 1;
    CHECK(config_hash(a) != config_hash(b));
}

}
