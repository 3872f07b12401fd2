#pragma once

// Command-line front end. Five subcommands cover the whole workflow:
//
//   gen-data    render a synthetic multi-scene corpus to a directory
//   pretrain    self-supervised backbone warmup (contrastive, mpda on|off)
//   train-bank  stage 1: prompt-bank training with scene labels
//   distill     stage 2: distill the bank into the label-free branch
//   eval        retrieval metrics for a checkpoint (optional ensembles)
//
// Exit codes: 0 success, 1 usage error (bad flags or config), 2 data error
// (unreadable corpus/checkpoint/report paths), 3 numerical failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "versreid/dataset.hpp"
#include "versreid/errors.hpp"
#include "versreid/pipeline.hpp"

namespace versreid {

namespace detail {

inline float last_loss(const std::vector<float>& losses) {
  return losses.empty() ? 0.0f : losses.back();
}

}  // namespace detail

inline int cli_main(int argc, char** argv) {
  CLI::App app{"versreid: multi-scene person re-identification at desk scale"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic multi-scene corpus");
  std::string gen_out;
  std::uint64_t gen_ids = 40;
  std::uint64_t gen_per_scene = 9;
  std::uint64_t gen_seed = 1234;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--ids", gen_ids, "Number of identities")->required();
  gen->add_option("--per-scene", gen_per_scene, "Images per (identity, scene)")->required();
  gen->add_option("--seed", gen_seed, "RNG seed")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Contrastive backbone pretraining");
  std::string pre_data, pre_config, pre_mpda, pre_out;
  pre->add_option("--data", pre_data, "Corpus directory")->required();
  pre->add_option("--config", pre_config, "Run configuration file")->required();
  pre->add_option("--mpda", pre_mpda, "Use the full augmentation family (on) or only geometric + lighting views (off)")
      ->required()
      ->check(CLI::IsMember({"on", "off"}));
  pre->add_option("--out", pre_out, "Checkpoint output path")->required();

  // train-bank
  auto* bank = app.add_subcommand("train-bank", "Stage 1: train the prompt bank with scene labels");
  std::string bank_data, bank_config, bank_init, bank_out;
  bank->add_option("--data", bank_data, "Corpus directory")->required();
  bank->add_option("--config", bank_config, "Run configuration file")->required();
  bank->add_option("--init", bank_init, "Optional checkpoint to initialize matching tensors from");
  bank->add_option("--out", bank_out, "Checkpoint output path")->required();

  // distill
  auto* dis = app.add_subcommand("distill", "Stage 2: distill the bank into the label-free branch");
  std::string dis_data, dis_config, dis_bank, dis_out;
  dis->add_option("--data", dis_data, "Corpus directory")->required();
  dis->add_option("--config", dis_config, "Run configuration file")->required();
  dis->add_option("--bank", dis_bank, "Trained bank checkpoint (frozen teacher)")->required();
  dis->add_option("--out", dis_out, "Checkpoint output path")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Retrieval metrics for a checkpoint");
  std::string ev_data, ev_model, ev_branch, ev_ensemble, ev_report;
  float ev_noise = 0.0f;
  ev->add_option("--data", ev_data, "Corpus directory")->required();
  ev->add_option("--model", ev_model, "Checkpoint to evaluate")->required();
  ev->add_option("--branch", ev_branch, "Which branch the checkpoint holds")
      ->required()
      ->check(CLI::IsMember({"bank", "vbranch"}));
  ev->add_option("--ensemble", ev_ensemble, "Prompt-group ensemble over simulated scene predictions")
      ->check(CLI::IsMember({"hard", "soft", "concat"}));
  ev->add_option("--classifier-noise", ev_noise,
                 "Probability the simulated scene classifier predicts a wrong scene")
      ->check(CLI::Range(0.0f, 1.0f));
  ev->add_option("--report", ev_report, "Report output path (JSON lines)")->required();

  try {
    app.parse(argc, argv);

    if (*gen) {
      const DatasetManifest manifest =
          generate_dataset(gen_out, gen_ids, gen_per_scene, gen_seed);
      std::cout << "wrote " << manifest.records.size() << " images to " << gen_out << "\n";
      return 0;
    }
    if (*pre) {
      const RunConfig cfg = parse_config(pre_config);
      const PretrainStats stats = run_pretrain(cfg, pre_data, pre_mpda == "on", pre_out);
      std::cout << "pretrain: " << stats.steps << " steps, final loss "
                << detail::last_loss(stats.step_losses) << ", wrote " << pre_out << "\n";
      return 0;
    }
    if (*bank) {
      const RunConfig cfg = parse_config(bank_config);
      const std::optional<std::string> init =
          bank_init.empty() ? std::nullopt : std::optional<std::string>(bank_init);
      const TrainResult result = run_train_bank(cfg, bank_data, init, bank_out);
      std::cout << "train-bank: " << result.steps << " steps, final loss "
                << detail::last_loss(result.step_losses) << ", wrote " << bank_out << "\n";
      return 0;
    }
    if (*dis) {
      const RunConfig cfg = parse_config(dis_config);
      const DistillResult result = run_distill(cfg, dis_data, dis_bank, dis_out);
      std::cout << "distill: " << result.steps << " steps, final loss "
                << detail::last_loss(result.step_losses) << ", wrote " << dis_out << "\n";
      return 0;
    }
    if (*ev) {
      EvalOptions opt;
      opt.branch = ev_branch;
      opt.ensemble = parse_ensemble_mode(ev_ensemble);
      opt.classifier_noise = ev_noise;
      const EvalReport report = run_eval(ev_data, ev_model, opt);
      write_report(report, ev_report);
      std::cout << report_json_lines(report);
      return 0;
    }
    return 0;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);  // prints CLI11's diagnostic to stderr
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace versreid
