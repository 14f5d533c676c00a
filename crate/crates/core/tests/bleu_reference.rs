use v2t_core::augment::sentence_bleu;

const FIXTURE: &str = include_str!("fixtures/bleu_reference.tsv");

#[test]
fn matches_reference_scores() {
    let mut n = 0;
    for line in FIXTURE.lines() {
        let mut cols = line.split('\t');
        let (hyp, reference, score) = (cols.next().unwrap(), cols.next().unwrap(), cols.next().unwrap());
        let want: f64 = score.parse().unwrap();
        let got = sentence_bleu(hyp, reference);
        assert!((got - want).abs() < 1e-6, "{hyp:?} vs {reference:?}: {got} != {want}");
        n += 1;
    }
    assert_eq!(n, 50);
}

#[test]
fn self_bleu_is_100() {
    for line in FIXTURE.lines() {
        let reference = line.split('\t').nth(1).unwrap();
        if !reference.is_empty() {
            assert_eq!(sentence_bleu(reference, reference), 100.0);
        }
    }
}
