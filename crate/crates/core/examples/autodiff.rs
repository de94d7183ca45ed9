//! The reverse-mode core on its own: build a graph, backpropagate, and check
//! one gradient against a central difference.
//!
//! ```text
//! cargo run --example autodiff
//! ```

use vectok::neural::{Graph, Tensor};

fn loss(w: &[f64], x: &Tensor, targets: &[Option<usize>]) -> Result<(Graph, vectok::neural::Var, vectok::neural::Var), vectok::neural::NeuralError> {
    let mut g = Graph::new();
    let w = g.input(Tensor::new(3, 4, w.to_vec()));
    let x = g.input(x.clone());
    let h = g.matmul(x, w);
    let h = g.gelu(h);
    let l = g.cross_entropy(h, targets);
    g.backward(l)?;
    Ok((g, w, l))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.5]);
    let targets = [Some(1), Some(3)];
    let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();

    let (g, wv, l) = loss(&w, &x, &targets)?;
    let analytic = g.grad(wv).expect("input gradient")[5];
    println!("loss {:.6}", g.value(l).data[0]);

    let h = 1e-5;
    let (mut up, mut down) = (w.clone(), w.clone());
    up[5] += h;
    down[5] -= h;
    let value = |w: &[f64]| -> Result<f64, vectok::neural::NeuralError> {
        let (g, _, l) = loss(w, &x, &targets)?;
        Ok(g.value(l).data[0])
    };
    let numeric = (value(&up)? - value(&down)?) / (2.0 * h);
    println!("dL/dw[5]: analytic {analytic:.9}, central difference {numeric:.9}");
    Ok(())
}
