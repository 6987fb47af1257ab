#include "ezsd/pipeline.hpp"

#include <iostream>

#include "ezsd/util.hpp"

namespace ezsd {

namespace fs = std::filesystem;

namespace {

void log(const std::string& stage, const std::string& msg) { std::clog << "[" << stage << "] " << msg << "\n"; }

template <typename Fn>
auto guarded(const std::string& stage, const std::string& artifact, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(stage, artifact, e.what());
  }
}

Dataset load_dataset(const std::string& stage, const std::string& annotations, const DatasetSplit& split) {
  return guarded(stage, annotations, [&] {
    if (!fs::exists(annotations)) throw DatasetError("annotation file not found");
    return load_coco_json(annotations, split);
  });
}

DatasetSplit load_split(const std::string& stage, const RunConfig& cfg) {
  return guarded(stage, cfg.dataset.split_config, [&] { return read_split_config(cfg.dataset.split_config); });
}

std::unique_ptr<Encoder> load_encoder_for(const std::string& stage, const RunConfig& cfg) {
  const std::string artifact = !cfg.encoder.checkpoint.empty() ? cfg.encoder.checkpoint : cfg.encoder.plugin;
  return guarded(stage, artifact, [&] { return make_encoder(cfg.encoder); });
}

void ensure_output_dir(const std::string& stage, const RunConfig& cfg) {
  guarded(stage, cfg.output_dir, [&] {
    fs::create_directories(cfg.output_dir);
    return 0;
  });
}

std::vector<Box> base_boxes(const Dataset& ds, std::int64_t image_id) {
  std::vector<Box> out;
  for (std::size_t i : ds.annotations_of(image_id)) {
    const auto& a = ds.annotations[i];
    if (ds.role(a.category_id) == CategoryRole::kBase) out.push_back(a.box);
  }
  return out;
}

}  // namespace

MakeToySummary cmd_make_toy(const RunConfig& cfg) {
  const std::string stage = "make-toy";
  MakeToySummary s;
  s.train_dir = fs::path(cfg.toy.out_dir) / "train";
  const Dataset train = guarded(stage, s.train_dir.string(), [&] { return make_toy_dataset(s.train_dir, cfg.toy.options); });
  s.train_images = train.images.size();
  s.train_annotations = train.annotations.size();
  if (cfg.toy.n_eval_images > 0) {
    s.eval_dir = fs::path(cfg.toy.out_dir) / "eval";
    ToyOptions opts = cfg.toy.options;
    opts.n_images = cfg.toy.n_eval_images;
    opts.seed = derive_seed(cfg.toy.options.seed, "toy.eval");
    opts.first_image_id = cfg.toy.options.first_image_id + cfg.toy.options.n_images;
    const Dataset eval = guarded(stage, s.eval_dir.string(), [&] { return make_toy_dataset(s.eval_dir, opts); });
    s.eval_images = eval.images.size();
    s.eval_annotations = eval.annotations.size();
  }
  log(stage, "train: " + std::to_string(s.train_images) + " images, " + std::to_string(s.train_annotations) +
                 " annotations; eval: " + std::to_string(s.eval_images) + " images, " +
                 std::to_string(s.eval_annotations) + " annotations");
  return s;
}

AdaptSummary cmd_adapt(const RunConfig& cfg) {
  const std::string stage = "adapt";
  ensure_output_dir(stage, cfg);
  const DatasetSplit split = load_split(stage, cfg);
  const Dataset train = load_dataset(stage, cfg.dataset.train_annotations, split);
  const bool has_eval = fs::exists(cfg.dataset.eval_annotations);
  const Dataset eval = has_eval ? load_dataset(stage, cfg.dataset.eval_annotations, split) : train;
  const auto enc = load_encoder_for(stage, cfg);

  AdaptSummary s;
  s.checkpoint = cfg.out(kEncoderCheckpoint);
  s.before_csv = cfg.out(kAccBeforeCsv);
  s.after_csv = cfg.out(kAccAfterCsv);
  const std::vector<AccSetting> settings{AccSetting::kBase, AccSetting::kNovel, AccSetting::kGeneral};
  auto result = guarded(stage, cfg.dataset.train_annotations, [&] {
    s.before = evaluate_instance_acc(*enc, eval, settings, cfg.adapt.enlarge_factor, cfg.temperature,
                                     cfg.prompt_template, cfg.workers);
    const auto crops = collect_instance_crops(train, CropSide::kBase, cfg.adapt.enlarge_factor);
    const auto base = encode_text(*enc, split.base, cfg.prompt_template);
    return finetune_layernorm(*enc, train, crops, base, cfg.adapt, cfg.workers);
  });
  s.epoch_losses = result.epoch_losses;
  s.after = guarded(stage, cfg.dataset.eval_annotations, [&] {
    return evaluate_instance_acc(*result.encoder, eval, settings, cfg.adapt.enlarge_factor, cfg.temperature,
                                 cfg.prompt_template, cfg.workers);
  });
  guarded(stage, s.checkpoint.string(), [&] {
    save_encoder(s.checkpoint, *result.encoder);
    return 0;
  });
  guarded(stage, s.before_csv.string(), [&] {
    write_acc_csv(s.before_csv, s.before);
    write_acc_csv(s.after_csv, s.after);
    return 0;
  });
  auto general = [](const AccReport& r) {
    const auto v = r.accuracy(AccSetting::kGeneral, AccBin::kAvg);
    return v ? std::to_string(*v) : std::string("n/a");
  };
  log(stage, "general ACC " + general(s.before) + " -> " + general(s.after) + "; wrote " + s.checkpoint.string());
  return s;
}

GenProposalsSummary cmd_gen_proposals(const RunConfig& cfg) {
  const std::string stage = "gen-proposals";
  ensure_output_dir(stage, cfg);
  const DatasetSplit split = load_split(stage, cfg);
  const Dataset train = load_dataset(stage, cfg.dataset.train_annotations, split);
  const auto enc = load_encoder_for(stage, cfg);

  GenProposalsSummary s;
  s.manifest = cfg.out(kStoreManifest);
  ProposalStore store;
  store.dim = enc->dim();
  guarded(stage, cfg.dataset.train_annotations, [&] {
    const auto dictionary = encode_text(*enc, build_dictionary(split, cfg.proposals), cfg.prompt_template);
    for (const auto& rec : train.images) {
      const Image img = train.load_image(rec);
      store.images.push_back(
          {rec.id, generate_clip_proposals(img, base_boxes(train, rec.id), *enc, dictionary, cfg.proposals, cfg.workers)});
      ++s.count_histogram[store.images.back().proposals.size()];
    }
    return 0;
  });
  guarded(stage, s.manifest.string(), [&] {
    write_store(s.manifest, store);
    return 0;
  });
  s.images = store.images.size();
  std::string hist;
  for (const auto& [count, n] : s.count_histogram) hist += " " + std::to_string(count) + ":" + std::to_string(n);
  log(stage, std::to_string(s.images) + " images; proposals per image (count:images)" + hist);
  return s;
}

TrainSummary cmd_train(const RunConfig& cfg) {
  const std::string stage = "train";
  ensure_output_dir(stage, cfg);
  const DatasetSplit split = load_split(stage, cfg);
  const Dataset train = load_dataset(stage, cfg.dataset.train_annotations, split);
  const auto enc = load_encoder_for(stage, cfg);

  std::optional<ProposalStore> store;
  const auto manifest = cfg.out(kStoreManifest);
  if (cfg.detector.distill)
    store = guarded(stage, manifest.string(), [&] { return read_store(manifest, enc->dim()); });

  TrainSummary s;
  s.checkpoint = cfg.out(kDetectorCheckpoint);
  s.loss_csv = cfg.out(kLossCsv);
  Detector det = guarded(stage, cfg.dataset.train_annotations, [&] {
    return Detector(cfg.detector, encode_text(*enc, split.base, cfg.prompt_template));
  });
  const TrainData data = guarded(stage, manifest.string(), [&] {
    return build_train_data(train, store ? &*store : nullptr, cfg.proposals);
  });
  const int total = total_iterations(cfg.detector, data.samples.size());
  const int every = std::max(1, total / 20);
  s.log = guarded(stage, cfg.dataset.train_annotations, [&] {
    return train_detector(det, data, [&](const TrainLogRow& r) {
      if (r.iter % every == 0 || r.iter + 1 == total)
        log(stage, "iter " + std::to_string(r.iter) + "/" + std::to_string(total) + " L=" + std::to_string(r.loss.total()) +
                       " dist=" + std::to_string(r.loss.dist) + " cls=" + std::to_string(r.loss.cls) +
                       " reg=" + std::to_string(r.loss.reg));
    });
  });
  guarded(stage, s.loss_csv.string(), [&] {
    write_loss_csv(s.loss_csv, s.log);
    return 0;
  });
  guarded(stage, s.checkpoint.string(), [&] {
    det.save(s.checkpoint, nlohmann::json::object());
    return 0;
  });
  log(stage, "wrote " + s.checkpoint.string());
  return s;
}

std::vector<Detection> to_dataset_detections(const std::vector<SlotDetection>& dets, std::int64_t image_id,
                                             const Dataset& dataset) {
  const auto names = dataset.split.all();
  std::map<std::string, int> ids;
  for (const auto& c : dataset.categories) ids[c.name] = c.id;
  std::vector<Detection> out;
  for (const auto& d : dets) {
    if (d.slot < 0 || static_cast<std::size_t>(d.slot) >= names.size())
      throw DetectorError("detection slot " + std::to_string(d.slot) + " has no category");
    const auto it = ids.find(names[static_cast<std::size_t>(d.slot)]);
    if (it == ids.end()) continue;  // category absent from this annotation file
    out.push_back({image_id, it->second, d.box, d.score});
  }
  return out;
}

EvalSummary cmd_eval(const RunConfig& cfg, const std::optional<fs::path>& checkpoint) {
  const std::string stage = "eval";
  ensure_output_dir(stage, cfg);
  const DatasetSplit split = load_split(stage, cfg);
  const Dataset eval = load_dataset(stage, cfg.dataset.eval_annotations, split);
  const auto enc = load_encoder_for(stage, cfg);
  const fs::path ckpt = checkpoint ? *checkpoint : cfg.out(kDetectorCheckpoint);
  const Detector det = guarded(stage, ckpt.string(), [&] {
    if (!fs::exists(ckpt)) throw DetectorError("detector checkpoint not found");
    Detector d = Detector::load(ckpt);
    if (d.base_names() != split.base) throw DetectorError("checkpoint base categories differ from the split");
    return d;
  });

  EvalSummary s;
  std::vector<Detection> dets;
  guarded(stage, cfg.dataset.eval_annotations, [&] {
    const auto novel = encode_text(*enc, split.novel, cfg.prompt_template);
    for (const auto& rec : eval.images) {
      const auto found = det.infer(eval.load_image(rec), novel);
      const auto mapped = to_dataset_detections(found, rec.id, eval);
      dets.insert(dets.end(), mapped.begin(), mapped.end());
    }
    return 0;
  });
  s.detections = dets.size();
  s.result = evaluate_detections(dets, eval, cfg.eval.iou_threshold);
  const auto format = cfg.eval.format == "json" ? ReportFormat::kJson : ReportFormat::kCsv;
  s.report = cfg.out(format == ReportFormat::kJson ? "eval.json" : "eval.csv");
  guarded(stage, s.report.string(), [&] {
    emit_report(s.report, eval_rows(s.result), format);
    return 0;
  });
  auto fmt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  log(stage, std::to_string(s.detections) + " detections; AP base " + fmt(s.result.base) + " novel " +
                 fmt(s.result.novel) + " overall " + fmt(s.result.overall));
  return s;
}

StatsSummary cmd_stats(const RunConfig& cfg, const std::optional<fs::path>& store_path) {
  const std::string stage = "stats";
  ensure_output_dir(stage, cfg);
  const DatasetSplit split = load_split(stage, cfg);
  const Dataset train = load_dataset(stage, cfg.dataset.train_annotations, split);
  const fs::path manifest = store_path ? *store_path : cfg.out(kStoreManifest);
  const ProposalStore store = guarded(stage, manifest.string(), [&] { return read_store(manifest); });

  StatsSummary s;
  s.result = iogt_statistics(store, novel_annotations(train));
  const auto format = cfg.eval.format == "json" ? ReportFormat::kJson : ReportFormat::kCsv;
  s.report = cfg.out(format == ReportFormat::kJson ? "iogt.json" : "iogt.csv");
  guarded(stage, s.report.string(), [&] {
    emit_report(s.report, iogt_rows(s.result), format);
    return 0;
  });
  log(stage, "mean IoGT " + (s.result.mean_iogt ? std::to_string(*s.result.mean_iogt) : std::string("n/a")) +
                 " over " + std::to_string(s.result.num_novel_gt) + " novel GT, " +
                 std::to_string(s.result.total_proposals) + " proposals");
  return s;
}

}  // namespace ezsd
