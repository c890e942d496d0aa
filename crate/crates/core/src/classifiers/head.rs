use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inception::add_into;
use crate::nn::{ActivationLayer, Layer, Linear, Observer};
use crate::ops::activation::Activation;
use crate::scalar::Scalar;
use crate::tensor::{dims2, Tensor};

/// How the main and residual head paths are joined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    Concat,
    Add,
}

/// Fully connected head: a stack of linear layers in parallel with one
/// linear residual projection of the same flattened features.
pub struct DualHead<T: Scalar> {
    pub main: Vec<Linear<T>>,
    hidden_acts: Vec<ActivationLayer<T>>,
    pub residual: Linear<T>,
    pub combine: Combine,
    out_act: ActivationLayer<T>,
}

impl<T: Scalar> DualHead<T> {
    pub fn new<R: Rng + ?Sized>(
        in_features: usize,
        hidden: &[usize],
        residual: usize,
        combine: Combine,
        act: &dyn Fn() -> Result<Box<dyn Activation<T>>>,
        rng: &mut R,
    ) -> Result<Self> {
        let last = *hidden
            .last()
            .ok_or_else(|| Error::Config("head needs at least one linear layer".into()))?;
        if combine == Combine::Add && last != residual {
            return Err(Error::Config(format!(
                "additive head needs equal widths, main {last} vs residual {residual}"
            )));
        }
        let mut main = Vec::with_capacity(hidden.len());
        let mut width = in_features;
        for &h in hidden {
            main.push(Linear::new(width, h, rng));
            width = h;
        }
        let hidden_acts = (1..hidden.len())
            .map(|_| act().map(ActivationLayer::new))
            .collect::<Result<_>>()?;
        Ok(DualHead {
            main,
            hidden_acts,
            residual: Linear::new(in_features, residual, rng),
            combine,
            out_act: ActivationLayer::new(act()?),
        })
    }

    pub fn out_features(&self) -> usize {
        let main = self.main.last().map(|l| l.out_features()).unwrap_or(0);
        match self.combine {
            Combine::Concat => main + self.residual.out_features(),
            Combine::Add => main,
        }
    }

    fn join(&self, main: Tensor<T>, res: Tensor<T>) -> Result<Tensor<T>> {
        match self.combine {
            Combine::Add => {
                let mut y = main;
                add_into(&mut y, &res)?;
                Ok(y)
            }
            Combine::Concat => {
                let (n, a) = dims2(&main, "head")?;
                let (_, b) = dims2(&res, "head")?;
                let mut out = Vec::with_capacity(n * (a + b));
                for i in 0..n {
                    out.extend_from_slice(&main.data()[i * a..(i + 1) * a]);
                    out.extend_from_slice(&res.data()[i * b..(i + 1) * b]);
                }
                Tensor::from_vec(&[n, a + b], out)
            }
        }
    }

    fn run_main(&self, x: &Tensor<T>, obs: &mut Option<&mut Observer<'_, T>>) -> Result<Tensor<T>> {
        let mut h = self.main[0].forward(x)?;
        for (lin, act) in self.main[1..].iter().zip(&self.hidden_acts) {
            h = match obs {
                Some(o) => act.forward_observed(&h, *o)?,
                None => act.forward(&h)?,
            };
            h = lin.forward(&h)?;
        }
        Ok(h)
    }

    fn run(&self, x: &Tensor<T>, obs: &mut Option<&mut Observer<'_, T>>) -> Result<Tensor<T>> {
        let main = self.run_main(x, obs)?;
        let joined = self.join(main, self.residual.forward(x)?)?;
        match obs {
            Some(o) => self.out_act.forward_observed(&joined, *o),
            None => self.out_act.forward(&joined),
        }
    }
}

impl<T: Scalar> Layer<T> for DualHead<T> {
    fn describe(&self) -> String {
        let widths: Vec<_> = self.main.iter().map(|l| l.out_features().to_string()).collect();
        format!(
            "head [{}] {:?} residual {}",
            widths.join(","),
            self.combine,
            self.residual.out_features()
        )
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.residual.output_shape(input)?;
        Ok(vec![self.out_features()])
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, &mut None)
    }

    fn forward_observed(&self, x: &Tensor<T>, obs: &mut Observer<'_, T>) -> Result<Tensor<T>> {
        self.run(x, &mut Some(obs))
    }

    fn forward_train(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = self.main[0].forward_train(x)?;
        for (lin, act) in self.main[1..].iter_mut().zip(&mut self.hidden_acts) {
            h = act.forward_train(&h)?;
            h = lin.forward_train(&h)?;
        }
        let res = self.residual.forward_train(x)?;
        let joined = self.join(h, res)?;
        self.out_act.forward_train(&joined)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.out_act.backward(grad)?;
        let (g_main, g_res) = match self.combine {
            Combine::Add => (g.clone(), g),
            Combine::Concat => {
                let (n, _) = dims2(&g, "head_backward")?;
                let a = self.main.last().map(|l| l.out_features()).unwrap_or(0);
                let b = self.residual.out_features();
                let mut gm = Vec::with_capacity(n * a);
                let mut gr = Vec::with_capacity(n * b);
                for row in g.data().chunks(a + b) {
                    gm.extend_from_slice(&row[..a]);
                    gr.extend_from_slice(&row[a..]);
                }
                (Tensor::from_vec(&[n, a], gm)?, Tensor::from_vec(&[n, b], gr)?)
            }
        };
        let mut dx = self.residual.backward(&g_res)?;
        let mut h = g_main;
        for i in (1..self.main.len()).rev() {
            h = self.main[i].backward(&h)?;
            h = self.hidden_acts[i - 1].backward(&h)?;
        }
        h = self.main[0].backward(&h)?;
        add_into(&mut dx, &h)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut p: Vec<_> = self.main.iter().flat_map(|l| l.params()).collect();
        p.extend(self.residual.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p: Vec<_> = self.main.iter_mut().flat_map(|l| l.params_mut()).collect();
        p.extend(self.residual.params_mut());
        p
    }

    fn param_rows(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<_> = self
            .main
            .iter()
            .map(|l| (l.describe(), l.weight.len() + l.bias.len()))
            .collect();
        rows.push((
            format!("residual {}->{}", self.residual.in_features(), self.residual.out_features()),
            self.residual.weight.len() + self.residual.bias.len(),
        ));
        rows
    }

    fn macs(&self, input: &[usize]) -> Result<u64> {
        let mut total = self.residual.macs(input)?;
        for l in &self.main {
            total += l.macs(&[l.in_features()])?;
        }
        Ok(total)
    }
}
