mod support;

use std::sync::OnceLock;

use fadekit::error::Error;
use fadekit::harness::{EvalReport, Pipeline, Setting};
use fadekit::metrics::{cmc_rank_k, m_inp, mean_ap, RankedRetrieval};
use fadekit::protect::Protector;
use fadekit::synth::{read_image, Split};
use support::{small_plan, snapshot};

struct Run {
    dir: tempfile::TempDir,
    report: EvalReport,
}

fn run() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let report = Pipeline::new(small_plan(dir.path()), 0).unwrap().run_all().unwrap();
        Run { dir, report }
    })
}

fn pipeline() -> Pipeline {
    Pipeline::new(small_plan(run().dir.path()), 1).unwrap()
}

#[test]
fn layout_is_complete() {
    let root = run().dir.path();
    for rel in [
        "plan.toml",
        "data/manifest.jsonl",
        "models/extractor.fadekit",
        "models/extractor_log.jsonl",
        "protected/pixelfade/gallery/id000_v05.ppm",
        "protected/mosaic_4/query/id003_v04.ppm",
        "traces/pixelfade/gallery/id000_v05.jsonl",
        "traces/pixelfade/summary.jsonl",
        "attack/none/metrics.json",
        "attack/gaussian_blur_3/train_log.jsonl",
        "reports/cells/retrieval_pixelfade_P2P.json",
        "reports/cells/chaos_original.json",
        "reports/report.jsonl",
        "reports/report.txt",
    ] {
        assert!(root.join(rel).is_file(), "{rel} missing");
    }
}

#[test]
fn rerun_is_byte_identical() {
    let other = tempfile::tempdir().unwrap();
    Pipeline::new(small_plan(other.path()), 1).unwrap().run_all().unwrap();
    let mut a = snapshot(run().dir.path());
    let mut b = snapshot(other.path());
    // the saved plan records its own out_dir
    a.remove("plan.toml");
    b.remove("plan.toml");
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{k} differs");
    }
}

#[test]
fn attack_stage_reruns_in_isolation() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_plan(dir.path()), 1).unwrap();
    p.run_all().unwrap();
    let before = snapshot(dir.path());
    std::fs::remove_dir_all(dir.path().join("attack")).unwrap();
    p.attack().unwrap();
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn mosaic_changes_nearly_every_pixel() {
    let p = pipeline();
    let data = p.dataset().unwrap();
    let mosaic = Protector::Mosaic { block: 4 };
    let (mut changed, mut total) = (0usize, 0usize);
    for split in [Split::Query, Split::Gallery] {
        for v in data.split(split) {
            let orig = read_image(&p.layout().data().join(fadekit::synth::image_rel_path(
                split,
                v.identity_id,
                v.view,
            )))
            .unwrap();
            let prot = read_image(&p.layout().protected_image(&mosaic.dir_name(), split, v)).unwrap();
            let hw = orig.shape()[1] * orig.shape()[2];
            for px in 0..hw {
                total += 1;
                if (0..3).any(|c| orig.data()[c * hw + px] != prot.data()[c * hw + px]) {
                    changed += 1;
                }
            }
        }
    }
    let frac = changed as f64 / total as f64;
    assert!(frac >= 0.9, "{frac}");
}

#[test]
fn report_shape_and_round_trip() {
    let r = &run().report;
    let plan = small_plan(run().dir.path());
    assert_eq!(
        r.row_count(),
        plan.protectors.len() * plan.settings.len() + plan.protectors.len()
    );
    let text = std::fs::read_to_string(run().dir.path().join("reports/report.jsonl")).unwrap();
    assert_eq!(&EvalReport::from_jsonl(&text).unwrap(), r);
    let table = std::fs::read_to_string(run().dir.path().join("reports/report.txt")).unwrap();
    assert!(table.contains(&r.provenance.config_hash));
    assert!(table.contains("gen_data="));
    for c in &r.retrieval {
        for v in [c.rank1, c.map, c.minp] {
            assert!((0.0..=1.0).contains(&v), "{c:?}");
        }
    }
    for row in &r.protectors {
        assert!(row.recovered.ssim <= 1.0 && row.chaos.ad >= 0.0);
        assert!((0.0..=1.0).contains(&row.chaos.constraint_met_fraction));
    }
}

#[test]
fn o2o_is_the_same_for_every_protector() {
    let r = &run().report;
    let cells: Vec<_> = r.retrieval.iter().filter(|c| c.setting == Setting::O2O).collect();
    assert_eq!(cells.len(), 3);
    for c in &cells {
        assert_eq!((c.rank1, c.map, c.minp), (cells[0].rank1, cells[0].map, cells[0].minp));
    }
}

#[test]
fn gallery_order_does_not_change_metrics() {
    let p = pipeline();
    let data = p.dataset().unwrap();
    let model = p.extractor().unwrap();
    let emb = |vs: &[fadekit::synth::ViewRender]| {
        model
            .embed_many(&vs.iter().map(|v| v.image.clone()).collect::<Vec<_>>())
            .unwrap()
    };
    let (q, g) = (emb(&data.query), emb(&data.gallery));
    let ql: Vec<usize> = data.query.iter().map(|v| v.identity_id).collect();
    let gl: Vec<usize> = data.gallery.iter().map(|v| v.identity_id).collect();
    let metrics = |g: &[fadekit::tensor::Tensor], gl: &[usize]| {
        let r = RankedRetrieval::from_embeddings(&q, &ql, g, gl).unwrap();
        (cmc_rank_k(&r, 1).unwrap(), mean_ap(&r).unwrap(), m_inp(&r).unwrap())
    };
    let base = metrics(&g, &gl);
    let n = g.len();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    assert_eq!(
        {
            let mut s = perm.clone();
            s.sort();
            s
        },
        (0..n).collect::<Vec<_>>()
    );
    let pg: Vec<_> = perm.iter().map(|&i| g[i].clone()).collect();
    let pl: Vec<usize> = perm.iter().map(|&i| gl[i]).collect();
    let permuted = metrics(&pg, &pl);
    assert!((base.0 - permuted.0).abs() < 1e-12);
    assert!((base.1 - permuted.1).abs() < 1e-12);
    assert!((base.2 - permuted.2).abs() < 1e-12);
}

#[test]
fn report_names_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_plan(dir.path()), 1).unwrap();
    p.run_all().unwrap();
    std::fs::remove_file(dir.path().join("reports/cells/retrieval_mosaic_4_O2P.json")).unwrap();
    std::fs::remove_file(dir.path().join("attack/pixelfade/metrics.json")).unwrap();
    match p.report() {
        Err(Error::MissingCells(cells)) => {
            assert_eq!(
                cells,
                vec!["attack pixelfade".to_string(), "retrieval mosaic:4 O2P".to_string()]
            );
        }
        other => panic!("expected missing cells, got {other:?}"),
    }
}

#[test]
fn attack_needs_protected_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(small_plan(dir.path()), 1).unwrap();
    p.gen_data().unwrap();
    let data = p.dataset().unwrap();
    assert!(matches!(
        p.attack_with(Some(Protector::PixelFade), &data),
        Err(Error::MissingArtifact { .. })
    ));
    assert!(matches!(p.protect(), Err(Error::MissingArtifact { .. })));
}

#[test]
fn epsilon_changes_config_hash() {
    let a = small_plan(run().dir.path());
    let mut b = a.clone();
    b.protect.epsilon = 0.05;
    assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    assert_eq!(run().report.provenance.config_hash, a.config_hash().unwrap());
}
