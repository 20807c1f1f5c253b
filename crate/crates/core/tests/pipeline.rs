use dpsv::config::{AlignSource, PipelineConfig};
use dpsv::eval::Condition;
use dpsv::pipeline::{run_experiment, ExperimentOptions, PosteriorSystem};
use dpsv::synth::{generate_corpus, SynthConfig};

fn small_pipeline() -> PipelineConfig {
    let mut cfg = PipelineConfig::desk();
    cfg.hmm_components = 2;
    cfg.ubm_components = 16;
    cfg.pgmm_components = 2;
    cfg.em_iterations = 4;
    cfg.mlp_hidden = vec![64];
    cfg.mlp_epochs = 3;
    cfg
}

#[test]
fn no_speaker_offset_means_chance_speaker_eer() {
    let corpus = generate_corpus(&SynthConfig {
        n_speakers: 30,
        n_background_speakers: 20,
        mfcc_dim: 12,
        speaker_offset_scale: 0.0,
        ..Default::default()
    })
    .unwrap();
    let systems = [PosteriorSystem::Ubm, PosteriorSystem::Aligned(AlignSource::GmmHmm), PosteriorSystem::Aligned(AlignSource::Dnn)];
    let opts = ExperimentOptions { gmm_map: systems.to_vec(), ivector: Vec::new(), content: Vec::new() };
    let (_, report) = run_experiment(&corpus, &small_pipeline(), &opts).unwrap();
    let eers: Vec<f64> = systems.iter().map(|s| report.row(&format!("{s}/GMM-MAP"), Condition::TcIc).unwrap().eer).collect();
    let mean = eers.iter().sum::<f64>() / eers.len() as f64;
    assert!((0.40..=0.60).contains(&mean), "TC-IC EERs {eers:?}");
}

#[test]
fn speaker_offsets_separate_speakers() {
    let corpus = generate_corpus(&SynthConfig { n_speakers: 6, n_background_speakers: 20, mfcc_dim: 12, ..Default::default() }).unwrap();
    let opts = ExperimentOptions { gmm_map: vec![PosteriorSystem::Aligned(AlignSource::GmmHmm)], ivector: Vec::new(), content: vec![AlignSource::DnnHmm] };
    let (_, report) = run_experiment(&corpus, &small_pipeline(), &opts).unwrap();
    let speaker = report.row("HMM/GMM-MAP", Condition::TcIc).unwrap().eer;
    assert!(speaker < 0.25, "TC-IC EER {speaker}");
    let content = report.row("DNN+DNN-HMM (digit)", Condition::TcTw).unwrap().eer;
    assert!(content < 0.25, "TC-TW EER {content}");
}
