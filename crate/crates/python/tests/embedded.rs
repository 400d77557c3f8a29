use pyo3::prelude::*;

use medextract_py::medextract_py;

const SCRIPT: &std::ffi::CStr = c"
import json
import medextract_py as mx

assert mx.normalize_token('10') == '<num>'
doc = mx.Document('d', 'took aspirin 81 mg daily\\n', 'm=\"aspirin\" 1:1 1:1||do=\"81 mg\" 1:2 1:3')
pre, sentences = mx.preprocess(doc)
assert pre.lines[0] == ['took', 'aspirin', '<num>', 'mg', 'daily']
assert sentences == [(1, 0, 4)]
assert [a[1] for a in pre.annotations()] == ['medication', 'dosage']

perfect = {'d': [('medication', 1, 1, 1), ('dosage', 1, 2, 3)]}
assert mx.score([pre], perfect)['micro'] == (1.0, 1.0, 1.0)
assert mx.score([pre], {'d': []})['micro'] == (0.0, 0.0, 0.0)

emb = mx.Embeddings.train([pre] * 4, dim=4, epochs=1, seed=3)
try:
    mx.RelModel('encdec', emb, config=json.dumps({'hiden': 4}))
    raise AssertionError('accepted an unknown key')
except ValueError as e:
    assert 'hiden' in str(e)
";

#[test]
fn module_imports_and_scores() {
    pyo3::append_to_inittab!(medextract_py);
    Python::initialize();
    Python::attach(|py| {
        if let Err(e) = py.run(SCRIPT, None, None) {
            e.display(py);
            panic!("script failed");
        }
    });
}
