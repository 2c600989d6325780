// tlstm: command-line pipeline for time-aware LSTM refraction forecasting.
//
//   synth     -> cohort CSV
//   ingest    -> validated, history-ordered CSV plus an issue report
//   augment   -> JSONL samples tagged train/test/excluded
//   train     -> model directory (checkpoint, standardizer, loss trace)
//   evaluate  -> metrics.csv, table.csv, table.md
//   predict   -> SE and myopia class on stdout
//   gradcheck -> finite-difference check of the training gradient
//
// Every artifact-producing subcommand writes a run manifest first.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "tlstm/tlstm.hpp"

namespace fs = std::filesystem;
using namespace tlstm;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "1.0.0";

enum ExitCode : int {
    kOk = 0,
    kOther = 1,
    kUsage = 2,
    kMissingFile = 3,
    kSchema = 4,
    kModel = 5,
    kNumeric = 6,
};

struct MissingFile : Error {
    using Error::Error;
};
struct ModelError : Error {
    using Error::Error;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingFile("cannot open '" + p.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void require_file(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw MissingFile("no such file '" + p.string() + "'");
}

std::ofstream open_out(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    return out;
}

std::string fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// splitmix64 of the base seed mixed with a stage label
std::uint64_t derive_seed(std::uint64_t base, std::string_view stage) {
    std::uint64_t z = base;
    for (unsigned char c : stage) z = (z ^ c) * 0x100000001b3ull;
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Manifest {
public:
    explicit Manifest(std::string subcommand) {
        doc_["tool"] = "tlstm";
        doc_["version"] = kToolVersion;
        doc_["subcommand"] = std::move(subcommand);
        doc_["inputs"] = ordered_json::array();
        doc_["outputs"] = ordered_json::array();
        doc_["config"] = ordered_json::object();
        doc_["seeds"] = ordered_json::object();
    }
    void input(const fs::path& p) {
        doc_["inputs"].push_back({{"path", p.generic_string()}, {"fnv1a64", fnv1a(read_file(p))}});
    }
    void output(const fs::path& p) { doc_["outputs"].push_back(p.generic_string()); }
    void seed(const std::string& stage, std::uint64_t v) { doc_["seeds"][stage] = v; }
    template <class T>
    void config(const std::string& key, const T& v) {
        doc_["config"][key] = v;
    }
    void write(const fs::path& p) const {
        auto out = open_out(p);
        out << doc_.dump(2) << '\n';
    }

private:
    ordered_json doc_;
};

fs::path manifest_for_file(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

const char* degree_name(MyopiaDegree d) {
    switch (d) {
        case MyopiaDegree::none: return "no myopia";
        case MyopiaDegree::low: return "low myopia";
        case MyopiaDegree::moderate: return "moderate myopia";
        case MyopiaDegree::high: return "high myopia";
    }
    return "unknown";
}

ParseResult load_records(const fs::path& csv) {
    require_file(csv);
    std::ifstream in(csv);
    return parse_records(in);
}

KeyValues load_config(const std::optional<fs::path>& path) {
    if (!path) return {};
    require_file(*path);
    std::ifstream in(*path);
    return parse_key_values(in);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::optional<fs::path> spec;
    fs::path out;
    std::optional<std::uint64_t> seed;
    std::optional<double> paper_scale;
    std::optional<std::size_t> subjects;
    std::optional<double> noise_sd;
};

int run_synth(const SynthArgs& a) {
    CohortSpec spec = apply_cohort_config(CohortSpec{}, load_config(a.spec));
    if (a.paper_scale) {
        const auto scaled = paper_composition(*a.paper_scale, spec.seed);
        spec.eye_counts = scaled.eye_counts;
    }
    if (a.subjects) spec.n_subjects = *a.subjects;
    if (a.noise_sd) spec.noise_sd = *a.noise_sd;
    if (a.seed) spec.seed = derive_seed(*a.seed, "synth");
    spec.validate();

    Manifest m("synth");
    if (a.spec) m.input(*a.spec);
    if (a.seed) m.config("seed", *a.seed);
    m.seed("synth", spec.seed);
    m.config("n_subjects", spec.n_subjects);
    for (int v = 2; v <= 6; ++v) {
        m.config("visit_prob_" + std::to_string(v), spec.visit_probs[v - 2]);
        m.config("eyes_with_" + std::to_string(v), spec.eye_counts[v - 2]);
    }
    m.config("gap_min_days", spec.gap_min_days);
    m.config("gap_max_days", spec.gap_max_days);
    m.config("max_span_days", spec.max_span_days);
    m.config("first_visit", format_date(spec.first_visit));
    m.config("enrollment_window_days", spec.enrollment_window_days);
    m.config("age_min", spec.age_min);
    m.config("age_max", spec.age_max);
    m.config("baseline_intercept", spec.baseline_intercept);
    m.config("baseline_slope", spec.baseline_slope);
    m.config("baseline_sd", spec.baseline_sd);
    m.config("rate_r0", spec.rate_r0);
    m.config("rate_age_max", spec.rate_age_max);
    m.config("rate_age_span", spec.rate_age_span);
    m.config("rate_taper", spec.rate_taper);
    m.config("rate_sd", spec.rate_sd);
    m.config("noise_sd", spec.noise_sd);
    m.config("al_coupling", spec.al_coupling);
    m.output(a.out);
    m.write(manifest_for_file(a.out));

    const auto records = generate(spec);
    auto out = open_out(a.out);
    write_records_csv(out, records);
    std::cout << "records " << records.size() << " eyes " << spec.total_eyes() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct IngestArgs {
    fs::path input;
    fs::path out;
};

int run_ingest(const IngestArgs& a) {
    require_file(a.input);
    const fs::path report = fs::path(a.out.string() + ".issues.csv");
    Manifest m("ingest");
    m.input(a.input);
    m.output(a.out);
    m.output(report);
    m.write(manifest_for_file(a.out));

    const auto parsed = load_records(a.input);
    const auto grouped = group_histories(parsed.records);
    std::vector<VisionRecord> ordered;
    for (const auto& h : grouped.histories) ordered.insert(ordered.end(), h.records.begin(), h.records.end());
    {
        auto out = open_out(a.out);
        write_records_csv(out, ordered);
    }
    std::vector<RowIssue> issues = parsed.errors;
    for (const auto& w : parsed.warnings) issues.push_back({w.row, "warning: " + w.reason});
    for (const auto& s : grouped.skipped) issues.push_back({s.row, "skipped: " + s.reason});
    {
        auto out = open_out(report);
        write_issue_report(out, issues);
    }
    std::cout << "rows accepted " << parsed.records.size() << " rejected " << parsed.errors.size() << " warnings "
              << parsed.warnings.size() << '\n'
              << "histories " << grouped.histories.size() << " records kept " << ordered.size() << " skipped "
              << grouped.skipped.size() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct AugmentArgs {
    fs::path histories;
    fs::path out;
    std::string split = "per_subject";
    double ratio = 0.8;
    std::uint64_t seed = 42;
};

int run_augment(const AugmentArgs& a) {
    require_file(a.histories);
    const auto mode = parse_split_mode(a.split);
    const std::uint64_t split_seed = derive_seed(a.seed, "split");
    Manifest m("augment");
    m.input(a.histories);
    m.config("split", to_string(mode));
    m.config("ratio", a.ratio);
    m.config("seed", a.seed);
    m.seed("split", split_seed);
    m.output(a.out);
    m.write(manifest_for_file(a.out));

    const auto parsed = load_records(a.histories);
    if (!parsed.errors.empty())
        throw SchemaError("histories file has " + std::to_string(parsed.errors.size()) + " invalid rows (first: row " +
                          std::to_string(parsed.errors.front().row) + " " + parsed.errors.front().reason + ")");
    const auto grouped = group_histories(parsed.records);
    std::vector<Sample> samples;
    for (const auto& h : grouped.histories) {
        auto s = augment(h);
        samples.insert(samples.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    std::map<std::size_t, std::size_t> per_length;
    for (const auto& s : samples) ++per_length[s.length()];
    const auto ds = split(std::move(samples), a.ratio, split_seed, mode);
    {
        auto out = open_out(a.out);
        write_split_dataset(out, ds);
    }
    std::size_t total = 0;
    for (const auto& [L, n] : per_length) total += n;
    std::cout << "histories " << grouped.histories.size() << " samples " << total << '\n';
    for (const auto& [L, n] : per_length) std::cout << "length " << L << ' ' << n << '\n';
    std::cout << "train " << ds.all_train().size() << " test " << ds.all_test().size() << " excluded "
              << ds.excluded.size() << '\n';
    for (const auto& w : ds.warnings) std::cerr << "warning: " << w << '\n';
    return kOk;
}

SplitDataset load_samples(const fs::path& p) {
    require_file(p);
    std::ifstream in(p);
    return read_split_dataset(in);
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    fs::path samples;
    std::optional<fs::path> config;
    fs::path out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, batch_size, hidden_size, head_layers, checkpoint_every;
    std::optional<double> lr, clip_norm;
    std::optional<std::string> decay, optimizer;
    std::size_t threads = 1;
};

int run_train(const TrainArgs& a) {
    require_file(a.samples);
    TrainConfig c = apply_train_config(TrainConfig{}, load_config(a.config));
    if (a.epochs) c.epochs = *a.epochs;
    if (a.batch_size) c.batch_size = *a.batch_size;
    if (a.hidden_size) c.hidden_size = *a.hidden_size;
    if (a.head_layers) c.head_layers = *a.head_layers;
    if (a.checkpoint_every) c.checkpoint_every = *a.checkpoint_every;
    if (a.lr) c.lr = *a.lr;
    if (a.clip_norm) c.clip_norm = *a.clip_norm;
    if (a.decay) c.decay = parse_decay_kind(*a.decay);
    if (a.optimizer) c = apply_train_config(c, {{"optimizer", *a.optimizer}});
    if (a.seed) c.seed = derive_seed(*a.seed, "train");
    c.threads = a.threads;
    c.validate();

    const fs::path ckpt = a.out / "model.ckpt", stdz = a.out / "standardizer.json", loss = a.out / "loss.csv";
    Manifest m("train");
    m.input(a.samples);
    if (a.config) m.input(*a.config);
    if (a.seed) m.config("seed", *a.seed);
    m.seed("train", c.seed);
    for (const auto& [k, v] : to_key_values(c)) m.config(k, v);
    for (const auto& p : {ckpt, stdz, loss}) m.output(p);
    m.write(a.out / "manifest.json");

    const auto ds = load_samples(a.samples);
    const auto training = ds.all_train();
    if (training.empty()) throw SchemaError("no training samples in '" + a.samples.string() + "'");
    const auto st = fit_on_training(training);
    {
        auto out = open_out(stdz);
        st.save(out);
    }
    auto save = [&](std::size_t epoch, const TlstmParams& p) {
        auto out = open_out(ckpt);
        save_checkpoint(out, Checkpoint{p, c.decay, stdz.filename().string()});
        if (epoch != c.epochs) std::cout << "checkpoint at epoch " << epoch << '\n';
    };
    const std::size_t report_every = std::max<std::size_t>(1, c.epochs / 10);
    const auto result = train(training, st, c, save);
    {
        auto out = open_out(loss);
        result.trace.write_csv(out);
    }
    for (std::size_t e = 0; e < result.trace.epochs(); ++e)
        if ((e + 1) % report_every == 0 || e + 1 == result.trace.epochs())
            std::printf("epoch %zu mse %.6g\n", e + 1, result.trace.mse[e]);
    std::cout << "trained on " << training.size() << " samples, " << result.params.parameter_count() << " parameters\n";
    return kOk;
}

struct LoadedModel {
    Checkpoint checkpoint;
    Standardizer standardizer;
};

LoadedModel load_model(const fs::path& dir) {
    const fs::path ckpt = dir / "model.ckpt";
    if (!fs::is_regular_file(ckpt)) throw ModelError("no trained model at '" + ckpt.string() + "'");
    std::ifstream in(ckpt);
    LoadedModel m{load_checkpoint(in), {}};
    if (m.checkpoint.standardizer_ref.empty()) throw ModelError("checkpoint names no standardizer");
    const fs::path sp = dir / m.checkpoint.standardizer_ref;
    if (!fs::is_regular_file(sp)) throw ModelError("missing standardizer '" + sp.string() + "'");
    std::ifstream sin(sp);
    m.standardizer = Standardizer::load(sin);
    if (!m.standardizer.fitted()) throw ModelError("standardizer is not fitted");
    return m;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    fs::path samples;
    fs::path model;
    fs::path out;
};

int run_evaluate(const EvaluateArgs& a) {
    require_file(a.samples);
    const fs::path metrics = a.out / "metrics.csv", table = a.out / "table.csv", md = a.out / "table.md";
    Manifest m("evaluate");
    m.input(a.samples);
    m.input(a.model / "model.ckpt");
    m.input(a.model / "standardizer.json");
    for (const auto& p : {metrics, table, md}) m.output(p);

    const auto model = load_model(a.model);
    m.config("decay", to_string(model.checkpoint.kind));
    m.write(a.out / "manifest.json");

    const auto ds = load_samples(a.samples);
    const auto test = ds.all_test();
    if (test.empty()) throw SchemaError("no test samples in '" + a.samples.string() + "'");
    const auto result = evaluate(test, model.checkpoint.params, model.standardizer, model.checkpoint.kind);
    {
        auto out = open_out(metrics);
        write_metrics_csv(out, result);
    }
    {
        auto out = open_out(table);
        out << render_table(result, TableFormat::csv);
    }
    {
        auto out = open_out(md);
        out << render_table(result, TableFormat::markdown);
    }
    std::printf("test samples %zu\noverall MAE %.4f +/- %.4f D\nwithin %.2f D %.2f%%\n", result.overall.count,
                result.overall.mean, result.overall.std, kAcceptableErrorDiopters, 100.0 * result.within_acceptable);
    return kOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
    fs::path model;
    fs::path history;
    int horizon = 1;
    std::optional<std::string> subject;
    std::optional<std::string> eye;
};

int run_predict(const PredictArgs& a) {
    require_file(a.history);
    const auto model = load_model(a.model);
    const auto parsed = load_records(a.history);
    if (!parsed.errors.empty())
        throw SchemaError("history row " + std::to_string(parsed.errors.front().row) + ": " + parsed.errors.front().reason);
    auto grouped = group_histories(parsed.records);
    std::vector<VisionRecord> records;
    for (const auto& h : grouped.histories) {
        if (a.subject && h.subject_id != *a.subject) continue;
        if (a.eye && (h.eye == Eye::left ? "L" : "R") != *a.eye) continue;
        if (!records.empty()) throw SchemaError("history file holds several eyes; select one with --subject and --eye");
        records = h.records;
    }
    if (records.empty()) {
        // a single record never forms a history, but is still a valid input
        for (const auto& r : parsed.records) {
            if (a.subject && r.subject_id != *a.subject) continue;
            if (a.eye && (r.eye == Eye::left ? "L" : "R") != *a.eye) continue;
            records.push_back(r);
        }
        if (records.size() != 1) throw SchemaError("no matching history in '" + a.history.string() + "'");
    }
    if (records.size() > kMaxTrainLength)
        std::cerr << "warning: history has " << records.size() << " records; the model was trained on at most "
                  << kMaxTrainLength << '\n';
    std::vector<FeatureVector> xs;
    std::vector<int> gaps;
    for (std::size_t i = 0; i < records.size(); ++i) {
        xs.push_back(encode(records[i]));
        if (i > 0) gaps.push_back(compute_interval(records[i - 1].check_date, records[i].check_date));
    }
    const double se = predict_horizon(xs, gaps, a.horizon, model.checkpoint.params, model.standardizer,
                                      model.checkpoint.kind);
    std::printf("SE %.3f D (%s), %d quarter%s after %s\n", se, degree_name(classify_myopia(se)), a.horizon,
                a.horizon == 1 ? "" : "s", format_date(records.back().check_date).c_str());
    return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
    std::size_t seeds = 10;
    double tolerance = 1e-4;
    std::size_t coords = 32;
    std::uint64_t seed = 42;
};

int run_gradcheck(const GradcheckArgs& a) {
    double worst = 0.0;
    for (std::size_t s = 0; s < a.seeds; ++s) {
        for (std::size_t H : {1u, 4u, 64u}) {
            for (std::size_t T = 1; T <= kMaxTrainLength; ++T) {
                std::mt19937_64 rng(derive_seed(a.seed + s, "gradcheck-" + std::to_string(H) + "-" + std::to_string(T)));
                const auto params = random_params(H, rng);
                const auto batch = random_batch(T, 3, rng);
                const double e = model_gradient_check(params, batch, DecayKind::log_decay, H > 4 ? a.coords : 0);
                worst = std::max(worst, e);
            }
        }
    }
    std::printf("max relative error %.3e over %zu seeds (tolerance %.1e)\n", worst, a.seeds, a.tolerance);
    if (!(worst < a.tolerance)) throw NumericError("gradient check exceeded tolerance");
    return kOk;
}

int report(int code, const char* name, const std::string& message) {
    std::string flat = message;
    for (auto& c : flat)
        if (c == '\n') c = ' ';
    std::cerr << "error: code=" << name << " message=" << flat << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Time-aware LSTM pipeline for refraction forecasting"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kToolVersion);

    SynthArgs synth;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic cohort CSV");
    c_synth->add_option("--spec", synth.spec, "Cohort spec (key = value)")->check(CLI::ExistingFile);
    c_synth->add_option("--out", synth.out, "Output CSV")->required();
    c_synth->add_option("--seed", synth.seed, "Base seed");
    c_synth->add_option("--paper-scale", synth.paper_scale, "Use the reference visit composition at this scale (0,1]");
    c_synth->add_option("--subjects", synth.subjects, "Subjects (two eyes each) when no exact composition is set");
    c_synth->add_option("--noise-sd", synth.noise_sd, "Observation noise on SE (D)");

    IngestArgs ingest;
    auto* c_ingest = app.add_subcommand("ingest", "Validate records and order them into eye histories");
    c_ingest->add_option("--input", ingest.input, "Raw records CSV")->required();
    c_ingest->add_option("--out", ingest.out, "History CSV")->required();

    AugmentArgs aug;
    auto* c_aug = app.add_subcommand("augment", "Expand histories into samples and split train/test");
    c_aug->add_option("--histories", aug.histories, "History CSV")->required();
    c_aug->add_option("--out", aug.out, "Samples JSONL")->required();
    c_aug->add_option("--split", aug.split, "per_subject or per_sample")->capture_default_str();
    c_aug->add_option("--ratio", aug.ratio, "Training fraction")->capture_default_str();
    c_aug->add_option("--seed", aug.seed, "Base seed")->capture_default_str();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Fit the model on the training split");
    c_train->add_option("--samples", tr.samples, "Samples JSONL")->required();
    c_train->add_option("--config", tr.config, "Training config (key = value)");
    c_train->add_option("--out", tr.out, "Model directory")->required();
    c_train->add_option("--seed", tr.seed, "Base seed");
    c_train->add_option("--epochs", tr.epochs);
    c_train->add_option("--batch-size", tr.batch_size);
    c_train->add_option("--hidden-size", tr.hidden_size);
    c_train->add_option("--head-layers", tr.head_layers);
    c_train->add_option("--checkpoint-every", tr.checkpoint_every);
    c_train->add_option("--lr", tr.lr);
    c_train->add_option("--clip-norm", tr.clip_norm);
    c_train->add_option("--decay", tr.decay, "log_decay, inverse_decay or none");
    c_train->add_option("--optimizer", tr.optimizer, "adam or sgd");
    c_train->add_option("--threads", tr.threads, "Worker threads; 1 is bitwise reproducible")->capture_default_str();

    EvaluateArgs ev;
    auto* c_eval = app.add_subcommand("evaluate", "Stratified error metrics on the test split");
    c_eval->add_option("--samples", ev.samples, "Samples JSONL")->required();
    c_eval->add_option("--model", ev.model, "Model directory")->required();
    c_eval->add_option("--out", ev.out, "Metrics directory")->required();

    PredictArgs pr;
    auto* c_pred = app.add_subcommand("predict", "Forecast SE for one eye");
    c_pred->add_option("--model", pr.model, "Model directory")->required();
    c_pred->add_option("--history", pr.history, "Records CSV for the eye")->required();
    c_pred->add_option("--horizon", pr.horizon, "Quarters ahead")->required();
    c_pred->add_option("--subject", pr.subject);
    c_pred->add_option("--eye", pr.eye)->check(CLI::IsMember({"L", "R"}));

    GradcheckArgs gc;
    auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of the training gradient");
    c_gc->add_option("--seeds", gc.seeds)->capture_default_str();
    c_gc->add_option("--tolerance", gc.tolerance)->capture_default_str();
    c_gc->add_option("--coords", gc.coords, "Probed coordinates per tensor for wide layers")->capture_default_str();
    c_gc->add_option("--seed", gc.seed)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report(kUsage, "usage", e.what());
    }

    try {
        if (*c_synth) return run_synth(synth);
        if (*c_ingest) return run_ingest(ingest);
        if (*c_aug) return run_augment(aug);
        if (*c_train) return run_train(tr);
        if (*c_eval) return run_evaluate(ev);
        if (*c_pred) return run_predict(pr);
        if (*c_gc) return run_gradcheck(gc);
    } catch (const MissingFile& e) {
        return report(kMissingFile, "missing_file", e.what());
    } catch (const ConfigError& e) {
        return report(kUsage, "usage", e.what());
    } catch (const SchemaError& e) {
        return report(kSchema, "schema", e.what());
    } catch (const ModelError& e) {
        return report(kModel, "model", e.what());
    } catch (const StateError& e) {
        return report(kModel, "model", e.what());
    } catch (const NumericError& e) {
        return report(kNumeric, "numeric", e.what());
    } catch (const std::exception& e) {
        return report(kOther, "other", e.what());
    }
    return kOther;
}
