//! Class-wise prototypes from query embeddings and the adversarial loss on
//! them, with the gradient reversal visible in the prototype gradients.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use datr::cpa::{
    build_class_mask, extract_prototypes_batched, extract_prototypes_naive, prototype_adversarial_loss_with,
    ClassPrototypes, DomainLabel, PrototypeDiscriminator,
};

fn main() -> datr::Result<()> {
    let dev = Device::Cpu;
    // Two images, three queries each, four-dimensional embeddings.
    let z = Tensor::arange(0f64, 24.0, &dev)?.reshape((2, 3, 4))?;
    let classes = [0, 2, 0, 1, 2, 2];
    let mask = build_class_mask(&classes, 4, DType::F64, &dev)?;
    let fast = extract_prototypes_batched(&z, &mask, DomainLabel::Source)?;
    let slow = extract_prototypes_naive(&z, &classes, 4, DomainLabel::Source)?;
    println!("counts {:?}, present {:?}", fast.counts, fast.present);
    for (c, (a, b)) in fast.values_f64()?.iter().zip(slow.values_f64()?).enumerate() {
        println!("class {c}: batched {a:?} naive {b:?}");
    }

    let vm = VarMap::new();
    let disc = PrototypeDiscriminator::new(4, VarBuilder::from_varmap(&vm, DType::F64, &dev))?;
    let values = Var::from_tensor(&fast.values)?;
    let src = ClassPrototypes {
        values: values.as_tensor().clone(),
        ..fast.clone()
    };
    let tgt = ClassPrototypes {
        domain: DomainLabel::Target,
        ..src.clone()
    };
    for reverse in [false, true] {
        let loss = prototype_adversarial_loss_with(&disc, &src, &tgt, reverse)?;
        let g = loss.backward()?;
        let row0 = g.get(values.as_tensor()).expect("gradient").get(0)?.to_vec1::<f64>()?;
        println!("reverse={reverse}: loss {:.5}, d/dP_0 {row0:.5?}", loss.to_scalar::<f64>()?);
    }
    Ok(())
}
