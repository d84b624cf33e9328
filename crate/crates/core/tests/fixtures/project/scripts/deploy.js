// import "./contracts/Vault.sol";
async function main() {
  const Vault = await ethers.getContractFactory("Vault");
  await Vault.deploy();
}
main();
